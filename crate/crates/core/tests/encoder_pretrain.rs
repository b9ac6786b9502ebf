use ocnet_core::encoder::{holdout_accuracy, pretrain_encoder, Encoder, EncoderConfig, PretrainConfig};
use ocnet_core::episodes::{generate_synthetic, make_folds, SynthConfig};

#[test]
fn pretraining_learns_base_classes_and_localises() {
    let ds = generate_synthetic(&SynthConfig::default()).unwrap();
    let split = make_folds(ds.num_classes(), 0).unwrap();
    let t0 = std::time::Instant::now();
    let (enc, report) =
        pretrain_encoder(&ds, &split.train_classes, &EncoderConfig::default(), &PretrainConfig::default()).unwrap();
    eprintln!("pretrain took {:?}: {:?}", t0.elapsed(), report);

    assert!(report.holdout_size >= 20);
    assert!(report.holdout_accuracy > 0.8, "held-out accuracy {}", report.holdout_accuracy);

    // Epoch-mean loss goes down: last epoch well under the first, and no epoch jumps up
    // by more than a tenth of the first epoch's loss.
    let l = &report.epoch_losses;
    assert!(l.last().unwrap() < &(0.5 * l[0]), "{l:?}");
    for w in l.windows(2) {
        assert!(w[1] < w[0] + 0.1 * l[0], "{l:?}");
    }

    // Activation maps are brighter on the object than around it, on most images.
    let mut wins = 0;
    let n = 200;
    let fs = enc.config.feature_size();
    for i in 0..n {
        let s = &ds.samples[(i * 7) % ds.len()];
        let f = enc.extract_features(&s.image).unwrap();
        let cam = enc.cam_map(&f.high).unwrap();
        let frac = s.mask.area_fractions(fs, fs).unwrap();
        let (mut fin, mut nin, mut fout, mut nout) = (0.0, 0.0, 0.0, 0.0);
        for (c, a) in cam.iter().zip(&frac) {
            if *a >= 0.5 {
                fin += *c as f64;
                nin += 1.0;
            } else if *a == 0.0 {
                fout += *c as f64;
                nout += 1.0;
            }
        }
        if nin > 0.0 && fin / nin > fout / nout {
            wins += 1;
        }
    }
    eprintln!("CAM localisation: {wins}/{n}");
    assert!(wins as f64 >= 0.8 * n as f64);
}

#[test]
fn untrained_head_is_near_chance() {
    let ds = generate_synthetic(&SynthConfig::default()).unwrap();
    let split = make_folds(ds.num_classes(), 0).unwrap();
    let enc = Encoder::<f32>::new(EncoderConfig::default(), split.train_classes.clone(), 3).unwrap();
    let idx: Vec<usize> = split.train_classes.iter().flat_map(|&c| ds.samples_of(c).to_vec()).collect();
    let (acc, n) = holdout_accuracy(&enc, &ds, &idx).unwrap();
    let chance = 1.0 / split.train_classes.len() as f64;
    eprintln!("untrained accuracy {acc} over {n}, chance {chance}");
    // A random head collapses onto a few classes, so allow a wide band around chance.
    assert!(acc < 3.0 * chance, "untrained accuracy {acc}");
}
