//! Two-scale feature-pyramid decoder from the correlation feature to full-resolution
//! two-class logits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numerics::{ConvGeometry, Graph, Scalar, Tensor, Var};
use crate::params::{self, Bound, ParamStore};

const POINT: ConvGeometry = ConvGeometry::new(1, 1, 0, 1);
const SAME: ConvGeometry = ConvGeometry::new(3, 1, 1, 1);
const DOWN: ConvGeometry = ConvGeometry::new(3, 2, 1, 1);

pub const HEAD_W: &str = "decoder.head.w";
pub const HEAD_B: &str = "decoder.head.b";

/// `(name, fan_in, cout)` of every decoder conv, for `cin` input channels.
fn layers(cin: usize, width: usize) -> [(&'static str, usize, usize); 5] {
    [
        ("decoder.lat1", cin, width),
        ("decoder.down", 9 * width, width),
        ("decoder.lat2", width, width),
        ("decoder.smooth", 9 * width, width),
        ("decoder.head", width, 2),
    ]
}

pub fn init_params<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, cin: usize, width: usize, rng: &mut R) {
    for (name, fan_in, cout) in layers(cin, width) {
        let w = if name == "decoder.head" {
            params::lecun(rng, vec![fan_in, cout], fan_in)
        } else {
            params::he(rng, vec![fan_in, cout], fan_in)
        };
        store.insert(format!("{name}.w"), w);
        store.insert(format!("{name}.b"), params::zeros(vec![cout]));
    }
}

fn conv<T: Scalar>(g: &mut Graph<T>, bound: &Bound, x: Var, name: &str, geom: ConvGeometry) -> Result<Var> {
    let w = bound.var(&format!("{name}.w"))?;
    let b = bound.var(&format!("{name}.b"))?;
    g.conv2d(x, w, Some(b), geom)
}

/// Zeroes whole channels of `x: [h, w, c]` with probability `p` and rescales the rest
/// by `1 / (1 - p)`. The mask is a constant, so gradients flow only through kept channels.
fn channel_dropout<T: Scalar>(g: &mut Graph<T>, x: Var, p: f64, seed: u64) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    let c = shape[2];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep: Vec<T> = (0..c)
        .map(|_| if rng.random_bool(p) { T::zero() } else { T::lit(1.0 / (1.0 - p)) })
        .collect();
    let mask = g.constant(Tensor::from_fn(shape, |i| keep[i % c]));
    g.mul(x, mask)
}

/// `input: [h, w, cin]` → logits `[out_h * out_w, 2]`. `dropout` is `(p, seed)` for
/// training passes; channel dropout then precedes the head.
pub fn decode<T: Scalar>(
    g: &mut Graph<T>,
    bound: &Bound,
    input: Var,
    out_h: usize,
    out_w: usize,
    dropout: Option<(f64, u64)>,
) -> Result<Var> {
    let (h, w) = {
        let s = g.value(input).shape();
        (s[0], s[1])
    };
    let lat1 = conv(g, bound, input, "decoder.lat1", POINT)?;
    let lat1 = g.relu(lat1);
    let down = conv(g, bound, lat1, "decoder.down", DOWN)?;
    let down = g.relu(down);
    let lat2 = conv(g, bound, down, "decoder.lat2", POINT)?;
    let up = g.resize_bilinear(lat2, h, w)?;
    let merged = g.add(up, lat1)?;
    let smooth = conv(g, bound, merged, "decoder.smooth", SAME)?;
    let mut smooth = g.relu(smooth);
    if let Some((p, seed)) = dropout.filter(|(p, _)| *p > 0.0) {
        smooth = channel_dropout(g, smooth, p, seed)?;
    }
    let head = conv(g, bound, smooth, "decoder.head", POINT)?;
    let full = g.resize_bilinear(head, out_h, out_w)?;
    g.reshape(full, vec![out_h * out_w, 2])
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::grad_check;

    fn store(cin: usize, width: usize) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        init_params(&mut s, cin, width, &mut ChaCha8Rng::seed_from_u64(1));
        s
    }

    fn input(h: usize, c: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        Tensor::from_fn(vec![h, h, c], |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn output_matches_image_size() {
        let s = store(6, 4);
        let mut g = Graph::new();
        let bound = s.bind(&mut g, &["decoder."]);
        let x = g.constant(input(8, 6));
        let y = decode(&mut g, &bound, x, 32, 32, None).unwrap();
        assert_eq!(g.value(y).shape(), &[1024, 2]);
    }

    #[test]
    fn zero_head_is_uniform() {
        let mut s = store(6, 4);
        s.insert(HEAD_W, Tensor::zeros(vec![4, 2]).with_grad(true));
        let mut g = Graph::new();
        let bound = s.bind(&mut g, &["decoder."]);
        let x = g.constant(input(8, 6));
        let y = decode(&mut g, &bound, x, 16, 16, Some((0.5, 3))).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dropout_is_seeded_and_drops_whole_channels() {
        let run = |dropout| {
            let s = store(6, 8);
            let mut g = Graph::new();
            let bound = s.bind(&mut g, &["decoder."]);
            let x = g.constant(input(8, 6));
            let y = decode(&mut g, &bound, x, 8, 8, dropout).unwrap();
            g.value(y).clone()
        };
        assert_eq!(run(None), run(Some((0.0, 1))));
        assert_eq!(run(Some((0.5, 1))), run(Some((0.5, 1))));
        assert_ne!(run(Some((0.5, 1))), run(None));

        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(vec![3, 3, 64], 1.0));
        let y = channel_dropout(&mut g, x, 0.25, 9).unwrap();
        let v = g.value(y).data();
        for c in 0..64 {
            let col: Vec<f64> = (0..9).map(|p| v[p * 64 + c]).collect();
            assert!(col.iter().all(|&a| a == col[0]) && (col[0] == 0.0 || (col[0] - 4.0 / 3.0).abs() < 1e-15));
        }
        assert!(v.contains(&0.0));
    }

    #[test]
    fn decode_gradients() {
        let s = store(4, 3);
        let names: Vec<String> = s.iter().map(|(n, _)| n.clone()).collect();
        let mut params: Vec<Tensor<f64>> = s.iter().map(|(_, t)| t.clone()).collect();
        params.push(input(4, 4).with_grad(true));
        let targets: Vec<usize> = (0..64).map(|i| (i % 5 == 0) as usize).collect();
        let build = |g: &mut Graph<f64>, vars: &[Var]| -> Result<Var> {
            let bound = Bound::from_vars(names.iter().cloned().zip(vars.iter().copied()));
            let y = decode(g, &bound, vars[names.len()], 8, 8, Some((0.3, 4)))?;
            g.cross_entropy(y, &targets, None)
        };
        let report = grad_check(build, &params, 1e-6, None, 0).unwrap();
        assert!(report.max_relative_error < 1e-3, "{report:?}");
    }
}
