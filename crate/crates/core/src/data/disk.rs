//! Dataset directories:
//!
//! ```text
//! <dir>/train/manifest.txt   one line per sample: index,image file,mask file
//! <dir>/train/image_0000.pgm
//! <dir>/train/mask_0000.pgm  pixel value = class index
//! <dir>/val/...
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::pgm::{read_pgm, write_pgm};
use super::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::io::atomic_write;

pub const MANIFEST: &str = "manifest.txt";

pub fn save_split(samples: &[Sample], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for (i, s) in samples.iter().enumerate() {
        let img = format!("image_{i:04}.pgm");
        let mask = format!("mask_{i:04}.pgm");
        write_pgm(&dir.join(&img), s.side, s.side, &s.image)?;
        write_pgm(&dir.join(&mask), s.side, s.side, &s.mask)?;
        let _ = writeln!(manifest, "{i},{img},{mask}");
    }
    // the manifest goes last so a complete manifest implies complete files
    atomic_write(&dir.join(MANIFEST), manifest.as_bytes())
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    save_split(&ds.train, &dir.join("train"))?;
    save_split(&ds.val, &dir.join("val"))
}

pub fn load_split(dir: &Path, classes: usize) -> Result<Vec<Sample>> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let [index, img, mask] = fields[..] else {
            return Err(Error::dataset(
                &mpath,
                format!("line {}: expected `index,image,mask`", lineno + 1),
            ));
        };
        if index.parse::<usize>().ok() != Some(out.len()) {
            return Err(Error::dataset(
                &mpath,
                format!("line {}: index `{index}` out of sequence", lineno + 1),
            ));
        }
        let ipath = dir.join(img);
        let kpath = dir.join(mask);
        if !ipath.is_file() {
            return Err(Error::dataset(&ipath, "missing image file"));
        }
        if !kpath.is_file() {
            return Err(Error::dataset(&kpath, "missing mask file"));
        }
        let image = read_pgm(&ipath)?;
        let m = read_pgm(&kpath)?;
        if (image.width, image.height) != (m.width, m.height) {
            return Err(Error::dataset(
                &kpath,
                format!(
                    "mask is {}x{}, image is {}x{}",
                    m.width, m.height, image.width, image.height
                ),
            ));
        }
        if image.width != image.height {
            return Err(Error::dataset(&ipath, "images must be square"));
        }
        if let Some(&c) = m.pixels.iter().find(|&&c| c as usize >= classes) {
            return Err(Error::dataset(
                &kpath,
                format!("class value {c} >= class count {classes}"),
            ));
        }
        out.push(Sample {
            side: image.width,
            image: image.pixels,
            mask: m.pixels,
        });
    }
    Ok(out)
}

pub fn load_dataset(dir: &Path, classes: usize) -> Result<Dataset> {
    Ok(Dataset {
        classes,
        train: load_split(&dir.join("train"), classes)?,
        val: load_split(&dir.join("val"), classes)?,
    })
}

#[cfg(test)]
mod tests {
    use super::super::{gen_synthetic, Domain, SyntheticTaskSpec};
    use super::*;

    fn ds() -> Dataset {
        gen_synthetic(&SyntheticTaskSpec {
            domain: Domain::Rings,
            image: 16,
            classes: 3,
            sigma: 0.1,
            train_n: 3,
            val_n: 2,
            seed: 4,
        })
        .unwrap()
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = ds();
        save_dataset(&d, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path(), 3).unwrap(), d);
    }

    #[test]
    fn mask_class_out_of_range() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds(), dir.path()).unwrap();
        let err = load_dataset(dir.path(), 2).unwrap_err().to_string();
        assert!(err.contains("class value"), "{err}");
    }

    #[test]
    fn missing_file_and_extent_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds(), dir.path()).unwrap();
        let train = dir.path().join("train");
        write_pgm(&train.join("mask_0001.pgm"), 8, 8, &[0; 64]).unwrap();
        let err = load_split(&train, 3).unwrap_err().to_string();
        assert!(err.contains("mask is 8x8"), "{err}");
        fs::remove_file(train.join("image_0002.pgm")).unwrap();
        write_pgm(&train.join("mask_0001.pgm"), 16, 16, &[0; 256]).unwrap();
        let err = load_split(&train, 3).unwrap_err().to_string();
        assert!(err.contains("missing image"), "{err}");
    }
}
