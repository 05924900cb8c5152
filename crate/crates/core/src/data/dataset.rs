//! On-disk layout: `root/{split}/{rgb,thermal,labels}/NAME.png` with matching stems.
//!
//! RGB is 8-bit RGB (grayscale is replicated), thermal is 8-bit grayscale or
//! RGB (replicated from the first channel when grayscale), labels are 8-bit
//! grayscale class ids with 255 as ignore.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::data::scene::{LabelMap, SamplePair};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MODALITY_DIRS: [&str; 3] = ["rgb", "thermal", "labels"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleEntry {
    pub stem: String,
    pub rgb: PathBuf,
    pub thermal: PathBuf,
    pub labels: PathBuf,
}

#[derive(Clone, Debug, Default)]
pub struct DatasetIndex {
    pub entries: Vec<SampleEntry>,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn load(&self, i: usize) -> Result<SamplePair> {
        let e = &self.entries[i];
        let rgb = read_image(&e.rgb)?;
        let thermal = read_image(&e.thermal)?;
        let labels = read_labels(&e.labels)?;
        SamplePair::new(rgb, thermal, labels)
            .map_err(|_| Error::Dataset(format!("sample '{}': modality sizes differ", e.stem)))
    }

    pub fn load_all(&self) -> Result<Vec<SamplePair>> {
        (0..self.len()).map(|i| self.load(i)).collect()
    }
}

fn stems(dir: &Path) -> Result<BTreeSet<String>> {
    let mut out = BTreeSet::new();
    if !dir.exists() {
        return Ok(out);
    }
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path
            .extension()
            .is_some_and(|x| x.eq_ignore_ascii_case("png"))
        {
            if let Some(s) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(s.to_owned());
            }
        }
    }
    Ok(out)
}

/// Index one split. Every stem must exist in all three modality directories
/// and the three images must have equal sizes.
pub fn load_dataset(root: &Path, split: &str) -> Result<DatasetIndex> {
    let base = root.join(split);
    if !base.is_dir() {
        return Err(Error::io(
            &base,
            std::io::Error::new(
                std::io::ErrorKind::NotFound,
                "dataset split directory not found",
            ),
        ));
    }
    let dirs = MODALITY_DIRS.map(|d| base.join(d));
    let sets = [stems(&dirs[0])?, stems(&dirs[1])?, stems(&dirs[2])?];
    let all: BTreeSet<_> = sets.iter().flatten().cloned().collect();
    let mut entries = Vec::with_capacity(all.len());
    for stem in all {
        for (set, name) in sets.iter().zip(MODALITY_DIRS) {
            if !set.contains(&stem) {
                return Err(Error::Dataset(format!(
                    "sample '{stem}' has no {name} image"
                )));
            }
        }
        let [rgb, thermal, labels] = dirs.clone().map(|d| d.join(format!("{stem}.png")));
        let sizes = [&rgb, &thermal, &labels].map(|p| {
            image::image_dimensions(p).map_err(|e| Error::Image {
                path: p.clone(),
                source: e,
            })
        });
        let [a, b, c] = sizes;
        let (a, b, c) = (a?, b?, c?);
        if a != b || a != c {
            return Err(Error::Dataset(format!(
                "sample '{stem}': size mismatch (rgb {}x{}, thermal {}x{}, labels {}x{})",
                a.0, a.1, b.0, b.1, c.0, c.1
            )));
        }
        entries.push(SampleEntry {
            stem,
            rgb,
            thermal,
            labels,
        });
    }
    Ok(DatasetIndex { entries })
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| Error::Image {
        path: path.to_owned(),
        source: e,
    })
}

/// Decode to `[3, H, W]` in `[0, 1]`; grayscale is replicated.
pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let img = open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let hw = h * w;
    let mut data = vec![0.0f32; 3 * hw];
    for (i, px) in img.pixels().enumerate() {
        for ch in 0..3 {
            data[ch * hw + i] = px.0[ch] as f32 / 255.0;
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

pub fn read_labels(path: &Path) -> Result<LabelMap> {
    let img = open(path)?;
    if img.color().has_color() {
        return Err(Error::Dataset(format!(
            "{}: labels must be grayscale",
            path.display()
        )));
    }
    let img = img.to_luma8();
    LabelMap::new(img.height() as usize, img.width() as usize, img.into_raw())
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn save<P, C>(img: &ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::Pixel + image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image {
                path: path.to_owned(),
                source: other,
            },
        })
}

pub fn write_rgb(t: &Tensor<f32>, path: &Path) -> Result<()> {
    let (h, w) = (t.dim(1), t.dim(2));
    let hw = h * w;
    let d = t.data();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([to_u8(d[i]), to_u8(d[hw + i]), to_u8(d[2 * hw + i])])
    });
    save(&img, path)
}

/// Writes channel 0 only; thermal is single-channel at the source.
pub fn write_gray(t: &Tensor<f32>, path: &Path) -> Result<()> {
    let (h, w) = (t.dim(1), t.dim(2));
    let d = t.data();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([to_u8(d[y as usize * w + x as usize])])
    });
    save(&img, path)
}

pub fn write_labels(l: &LabelMap, path: &Path) -> Result<()> {
    let img = GrayImage::from_raw(l.width as u32, l.height as u32, l.data.clone())
        .ok_or_else(|| Error::dim("write_labels", &[l.height, l.width], &[l.data.len()]))?;
    save(&img, path)
}

pub fn write_palette_png(l: &LabelMap, palette: &[[u8; 3]], path: &Path) -> Result<()> {
    let img = RgbImage::from_fn(l.width as u32, l.height as u32, |x, y| {
        let c = l.data[y as usize * l.width + x as usize] as usize;
        Rgb(palette[c % palette.len()])
    });
    save(&img, path)
}

/// Write samples as `NAME = {index:05}` in the split layout.
pub fn write_split(root: &Path, split: &str, samples: &[SamplePair]) -> Result<()> {
    let base = root.join(split);
    for d in MODALITY_DIRS {
        let dir = base.join(d);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for (i, s) in samples.iter().enumerate() {
        let name = format!("{i:05}.png");
        write_rgb(&s.rgb, &base.join("rgb").join(&name))?;
        write_gray(&s.thermal, &base.join("thermal").join(&name))?;
        write_labels(&s.labels, &base.join("labels").join(&name))?;
    }
    Ok(())
}
