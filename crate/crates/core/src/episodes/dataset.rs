use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};

use crate::error::{Error, Result};

/// RGB image with channels-last `f32` samples in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::shape("Image::new", format!("{height}x{width}x3 vs {}", data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn hflip(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in (0..self.width).rev() {
                data.extend_from_slice(&self.pixel(y, x));
            }
        }
        Self { data, ..*self }
    }

    /// Axis-aligned crop, `out` must fit inside the image.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Self {
        let mut data = Vec::with_capacity(h * w * 3);
        for y in top..top + h {
            let start = (y * self.width + left) * 3;
            data.extend_from_slice(&self.data[start..start + w * 3]);
        }
        Self { height: h, width: w, data }
    }

    /// Nearest-neighbour resize.
    pub fn resize_nearest(&self, h: usize, w: usize) -> Self {
        let mut data = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            let sy = (y * self.height) / h;
            for x in 0..w {
                let sx = (x * self.width) / w;
                data.extend_from_slice(&self.pixel(sy, sx));
            }
        }
        Self { height: h, width: w, data }
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let bytes = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, bytes).expect("buffer size")
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        Self {
            height: img.height() as usize,
            width: img.width() as usize,
            data: img.as_raw().iter().map(|&b| b as f32 / 255.0).collect(),
        }
    }
}

/// Binary mask, one `0`/`1` byte per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape("Mask::new", format!("{height}x{width} vs {}", data.len())));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidArgument("mask values must be 0 or 1".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn hflip(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in (0..self.width).rev() {
                data.push(self.data[y * self.width + x]);
            }
        }
        Self { data, ..*self }
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for y in top..top + h {
            let start = y * self.width + left;
            data.extend_from_slice(&self.data[start..start + w]);
        }
        Self { height: h, width: w, data }
    }

    pub fn resize_nearest(&self, h: usize, w: usize) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            let sy = (y * self.height) / h;
            for x in 0..w {
                let sx = (x * self.width) / w;
                data.push(self.data[sy * self.width + sx]);
            }
        }
        Self { height: h, width: w, data }
    }

    /// Fraction of foreground pixels inside each cell of an `h×w` grid
    /// (the mask dims must be integer multiples of the grid).
    pub fn area_fractions(&self, h: usize, w: usize) -> Result<Vec<f64>> {
        if h == 0 || w == 0 || self.height % h != 0 || self.width % w != 0 {
            return Err(Error::shape(
                "Mask::area_fractions",
                format!("{}x{} onto {h}x{w}", self.height, self.width),
            ));
        }
        let (sy, sx) = (self.height / h, self.width / w);
        let inv = 1.0 / (sy * sx) as f64;
        let mut out = vec![0.0; h * w];
        for y in 0..self.height {
            for x in 0..self.width {
                out[(y / sy) * w + x / sx] += self.data[y * self.width + x] as f64 * inv;
            }
        }
        Ok(out)
    }

    /// Binary grid mask: a cell is foreground when at least half of it is.
    pub fn downsample(&self, h: usize, w: usize) -> Result<Vec<bool>> {
        Ok(self.area_fractions(h, w)?.into_iter().map(|f| f >= 0.5).collect())
    }

    pub fn to_gray8(&self) -> GrayImage {
        GrayImage::from_raw(
            self.width as u32,
            self.height as u32,
            self.data.iter().map(|&v| v * 255).collect(),
        )
        .expect("buffer size")
    }

    /// Binarises an 8-bit grayscale mask at 128 (i.e. 0.5).
    pub fn from_gray8(img: &GrayImage) -> Self {
        Self {
            height: img.height() as usize,
            width: img.width() as usize,
            data: img.as_raw().iter().map(|&b| (b >= 128) as u8).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    /// Pixels of the one labelled `class_id` object.
    pub mask: Mask,
    pub class_id: usize,
    /// Classes of unlabelled distractor objects, when known (synthetic data only).
    pub distractors: Vec<usize>,
}

/// Immutable collection of labelled samples sharing one image size.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub samples: Vec<Sample>,
    pub height: usize,
    pub width: usize,
    by_class: Vec<Vec<usize>>,
}

impl Dataset {
    pub fn new(class_names: Vec<String>, samples: Vec<Sample>) -> Result<Self> {
        if class_names.is_empty() {
            return Err(Error::Dataset("no classes found".into()));
        }
        let Some(first) = samples.first() else {
            return Err(Error::Dataset("dataset contains no samples".into()));
        };
        let (height, width) = (first.image.height, first.image.width);
        let mut by_class = vec![Vec::new(); class_names.len()];
        for (i, s) in samples.iter().enumerate() {
            if s.image.height != height || s.image.width != width {
                return Err(Error::Dataset(format!(
                    "sample {i} is {}x{}, expected {height}x{width}",
                    s.image.height, s.image.width
                )));
            }
            if s.mask.height != height || s.mask.width != width {
                return Err(Error::Dataset(format!("sample {i} mask size differs from its image")));
            }
            let Some(bucket) = by_class.get_mut(s.class_id) else {
                return Err(Error::Dataset(format!("sample {i} has unknown class {}", s.class_id)));
            };
            bucket.push(i);
        }
        Ok(Self {
            class_names,
            samples,
            height,
            width,
            by_class,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples_of(&self, class: usize) -> &[usize] {
        self.by_class.get(class).map_or(&[], Vec::as_slice)
    }

    /// Writes `<root>/<class_name>/<id>.img.png` and `<id>.mask.png` for every sample.
    pub fn save_folder(&self, root: &Path) -> Result<()> {
        for (class, name) in self.class_names.iter().enumerate() {
            let dir = root.join(name);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for (n, &i) in self.samples_of(class).iter().enumerate() {
                let s = &self.samples[i];
                let img_path = dir.join(format!("{n:04}.img.png"));
                s.image
                    .to_rgb8()
                    .save(&img_path)
                    .map_err(|source| Error::Image { path: img_path, source })?;
                let mask_path = dir.join(format!("{n:04}.mask.png"));
                s.mask
                    .to_gray8()
                    .save(&mask_path)
                    .map_err(|source| Error::Image { path: mask_path, source })?;
            }
        }
        Ok(())
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

/// Loads a `<root>/<class_name>/<id>.img.png` + `<id>.mask.png` tree.
///
/// Class ids follow the sorted order of the class directory names.
pub fn ingest_folder(root: &Path) -> Result<Dataset> {
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect();
    if class_dirs.is_empty() {
        return Err(Error::Dataset(format!("no classes found in {}", root.display())));
    }
    let mut class_names = Vec::new();
    let mut samples = Vec::new();
    for (class_id, dir) in class_dirs.iter().enumerate() {
        class_names.push(dir.file_name().unwrap_or_default().to_string_lossy().into_owned());
        for path in sorted_entries(dir)? {
            let name = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
            let Some(stem) = name.strip_suffix(".img.png") else {
                continue;
            };
            let mask_path = dir.join(format!("{stem}.mask.png"));
            if !mask_path.exists() {
                return Err(Error::Dataset(format!(
                    "missing mask {} for image {}",
                    mask_path.display(),
                    path.display()
                )));
            }
            let rgb = image::open(&path)
                .map_err(|source| Error::Image { path: path.clone(), source })?
                .to_rgb8();
            let gray = image::open(&mask_path)
                .map_err(|source| Error::Image { path: mask_path.clone(), source })?
                .to_luma8();
            if rgb.dimensions() != gray.dimensions() {
                return Err(Error::Dataset(format!(
                    "{} and its mask differ in size",
                    path.display()
                )));
            }
            samples.push(Sample {
                image: Image::from_rgb8(&rgb),
                mask: Mask::from_gray8(&gray),
                class_id,
                distractors: Vec::new(),
            });
        }
    }
    Dataset::new(class_names, samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn solid(h: usize, w: usize, v: f32) -> Image {
        Image::new(h, w, vec![v; h * w * 3]).unwrap()
    }

    #[test]
    fn area_fractions_average_cells() {
        let mask = Mask::new(2, 4, vec![1, 1, 0, 1, 1, 0, 0, 0]).unwrap();
        assert_eq!(mask.area_fractions(1, 2).unwrap(), vec![0.75, 0.25]);
        assert_eq!(mask.downsample(1, 2).unwrap(), vec![true, false]);
    }

    #[test]
    fn hflip_twice_is_identity() {
        let img = Image::new(2, 3, (0..18).map(|i| i as f32 / 18.0).collect()).unwrap();
        assert_eq!(img.hflip().hflip(), img);
        assert_eq!(img.hflip().pixel(0, 0), img.pixel(0, 2));
    }

    #[test]
    fn rejects_mixed_sizes() {
        let a = Sample {
            image: solid(4, 4, 0.5),
            mask: Mask::empty(4, 4),
            class_id: 0,
            distractors: vec![],
        };
        let b = Sample {
            image: solid(5, 4, 0.5),
            mask: Mask::empty(5, 4),
            class_id: 0,
            distractors: vec![],
        };
        assert!(Dataset::new(vec!["a".into()], vec![a, b]).is_err());
    }

    fn write_pair(dir: &Path, stem: &str, mask: &GrayImage) {
        fs::create_dir_all(dir).unwrap();
        let rgb = RgbImage::from_pixel(mask.width(), mask.height(), image::Rgb([10, 20, 30]));
        rgb.save(dir.join(format!("{stem}.img.png"))).unwrap();
        mask.save(dir.join(format!("{stem}.mask.png"))).unwrap();
    }

    #[test]
    fn ingests_class_directories() {
        let tmp = tempfile::tempdir().unwrap();
        let mask = GrayImage::from_pixel(4, 4, image::Luma([255]));
        for class in ["cat", "dog"] {
            for id in 0..3 {
                write_pair(&tmp.path().join(class), &format!("{id}"), &mask);
            }
        }
        let ds = ingest_folder(tmp.path()).unwrap();
        assert_eq!(ds.len(), 6);
        assert_eq!(ds.class_names, vec!["cat", "dog"]);
        assert_eq!(ds.samples_of(1).len(), 3);
        assert_eq!(ds.samples[5].class_id, 1);
    }

    #[test]
    fn empty_directory_has_no_classes() {
        let tmp = tempfile::tempdir().unwrap();
        let err = ingest_folder(tmp.path()).unwrap_err();
        assert!(err.to_string().contains("no classes found"), "{err}");
    }

    #[test]
    fn missing_mask_names_the_file() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("cls");
        fs::create_dir_all(&dir).unwrap();
        RgbImage::new(4, 4).save(dir.join("7.img.png")).unwrap();
        let err = ingest_folder(tmp.path()).unwrap_err();
        assert!(err.to_string().contains("7.mask.png"), "{err}");
    }

    #[test]
    fn grayscale_masks_are_thresholded() {
        let tmp = tempfile::tempdir().unwrap();
        let gray = GrayImage::from_fn(8, 8, |x, y| image::Luma([((x * 8 + y) * 4) as u8]));
        write_pair(&tmp.path().join("c"), "0", &gray);
        let ds = ingest_folder(tmp.path()).unwrap();
        // Reference pass straight over the written bytes.
        let expected = gray.as_raw().iter().filter(|&&b| b as f32 / 255.0 >= 128.0 / 255.0).count();
        assert_eq!(ds.samples[0].mask.count(), expected);
        assert!(ds.samples[0].mask.data.iter().all(|&v| v <= 1));
    }

    #[test]
    fn save_then_ingest_round_trips() {
        let tmp = tempfile::tempdir().unwrap();
        let mut mask = Mask::empty(4, 4);
        mask.data[5] = 1;
        let samples = (0..2)
            .map(|c| Sample {
                image: solid(4, 4, 0.2 * (c + 1) as f32),
                mask: mask.clone(),
                class_id: c,
                distractors: vec![],
            })
            .collect();
        let ds = Dataset::new(vec!["a".into(), "b".into()], samples).unwrap();
        ds.save_folder(tmp.path()).unwrap();
        let back = ingest_folder(tmp.path()).unwrap();
        assert_eq!(back.samples[1].mask, mask);
        assert!((back.samples[1].image.data[0] - 0.4).abs() < 1.0 / 255.0);
    }
}
