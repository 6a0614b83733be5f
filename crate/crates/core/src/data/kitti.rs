//! KITTI raw layout:
//!
//! ```text
//! root/<date>/calib_cam_to_cam.txt
//! root/<date>/<drive>/image_02/data/0000000069.png
//! root/<date>/<drive>/proj_depth/groundtruth/image_02/0000000069.png   (optional)
//! root/splits/<split>.txt    lines like "2011_09_26/2011_09_26_drive_0002_sync 69 l"
//! ```
//!
//! Ground-truth depth PNGs are 16-bit with depth = value / 256 and 0 marking
//! a missing measurement.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{ImageBuffer, Luma, Rgb};

use super::FrameSample;
use crate::camera::CameraIntrinsics;
use crate::error::{Error, Result};
use crate::geometry::DepthMap;
use crate::image::ImageGrid;
use crate::tensor::{Mask, Tensor};

pub const KITTI_WIDTH: usize = 640;
pub const KITTI_HEIGHT: usize = 192;

/// Depth written for pixels without a ground-truth measurement; they are
/// also cleared in [`FrameSample::depth_valid`].
const MISSING_DEPTH: f64 = 1.0;

#[derive(Clone, Debug)]
struct SplitEntry {
    folder: String,
    frame: usize,
    camera: &'static str,
}

/// Lazily loaded samples of a split, in file order.
pub struct KittiSequence {
    root: PathBuf,
    entries: std::vec::IntoIter<SplitEntry>,
    width: usize,
    height: usize,
}

fn split_path(root: &Path, split: &str) -> PathBuf {
    let direct = PathBuf::from(split);
    if direct.is_file() {
        direct
    } else {
        root.join("splits").join(format!("{split}.txt"))
    }
}

/// Opens a split at the default 192×640 resolution.
pub fn load_kitti_sequence(root: &Path, split: &str) -> Result<KittiSequence> {
    KittiSequence::open(root, split, KITTI_WIDTH, KITTI_HEIGHT)
}

impl KittiSequence {
    /// `split` is either a path to a split file or a name under
    /// `root/splits/`.
    pub fn open(root: &Path, split: &str, width: usize, height: usize) -> Result<Self> {
        let path = split_path(root, split);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::format(&path, format!("line {}: expected `folder frame [l|r]`, got `{line}`", n + 1));
            if parts.len() < 2 {
                return Err(bad());
            }
            let frame = parts[1].parse().map_err(|_| bad())?;
            let camera = match parts.get(2).copied().unwrap_or("l") {
                "l" => "image_02",
                "r" => "image_03",
                _ => return Err(bad()),
            };
            entries.push(SplitEntry { folder: parts[0].to_string(), frame, camera });
        }
        Ok(Self { root: root.to_path_buf(), entries: entries.into_iter(), width, height })
    }

    pub fn remaining(&self) -> usize {
        self.entries.len()
    }

    fn image_path(&self, e: &SplitEntry, frame: usize) -> PathBuf {
        self.root.join(&e.folder).join(e.camera).join("data").join(format!("{frame:010}.png"))
    }

    fn depth_path(&self, e: &SplitEntry) -> PathBuf {
        self.root
            .join(&e.folder)
            .join("proj_depth/groundtruth")
            .join(e.camera)
            .join(format!("{:010}.png", e.frame))
    }

    fn calib_path(&self, e: &SplitEntry) -> PathBuf {
        let date = Path::new(&e.folder).parent().map(Path::to_path_buf).unwrap_or_default();
        self.root.join(date).join("calib_cam_to_cam.txt")
    }

    fn read_image(&self, path: &Path) -> Result<(ImageGrid, (usize, usize))> {
        let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
        let rgb = img.to_rgb8();
        let orig = (rgb.width() as usize, rgb.height() as usize);
        let rgb = if orig == (self.width, self.height) {
            rgb
        } else {
            image::imageops::resize(&rgb, self.width as u32, self.height as u32, FilterType::Triangle)
        };
        let (w, h) = (self.width, self.height);
        let grid = ImageGrid::from_fn(3, h, w, |c, y, x| rgb.get_pixel(x as u32, y as u32)[c] as f64 / 255.0)?;
        Ok((grid, orig))
    }

    fn read_depth(&self, path: &Path) -> Result<(DepthMap, Mask)> {
        let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
        let raw = img.to_luma16();
        let (sw, sh) = (raw.width() as usize, raw.height() as usize);
        let (w, h) = (self.width, self.height);
        let mut depth = vec![MISSING_DEPTH; w * h];
        let mut valid = vec![false; w * h];
        for y in 0..h {
            for x in 0..w {
                let v = raw.get_pixel(((x * sw) / w) as u32, ((y * sh) / h) as u32)[0];
                if v > 0 {
                    depth[y * w + x] = v as f64 / 256.0;
                    valid[y * w + x] = true;
                }
            }
        }
        Ok((DepthMap::new(Tensor::new([1, h, w], depth))?, Mask::new(h, w, valid)))
    }

    fn read_sample(&self, e: &SplitEntry) -> Result<FrameSample> {
        let target_path = self.image_path(e, e.frame);
        if !target_path.is_file() {
            return Err(Error::format(&target_path, "image file is missing"));
        }
        let (target, (ow, oh)) = self.read_image(&target_path)?;
        let neighbour = |frame: Option<usize>| -> Result<ImageGrid> {
            match frame.map(|f| self.image_path(e, f)).filter(|p| p.is_file()) {
                Some(p) => Ok(self.read_image(&p)?.0),
                None => {
                    log::debug!("{}: missing neighbour, reusing the target frame", target_path.display());
                    Ok(target.clone())
                }
            }
        };
        let prev = neighbour(e.frame.checked_sub(1))?;
        let next = neighbour(Some(e.frame + 1))?;
        let calib = self.calib_path(e);
        let k = read_calibration(&calib, e.camera)?.scaled(self.width as f64 / ow as f64, self.height as f64 / oh as f64);
        let dp = self.depth_path(e);
        let (depth, depth_valid) = if dp.is_file() {
            let (d, m) = self.read_depth(&dp)?;
            (Some(d), Some(m))
        } else {
            (None, None)
        };
        Ok(FrameSample {
            prev,
            target,
            next,
            intrinsics: k,
            depth,
            depth_valid,
            pose_prev: None,
            pose_next: None,
            flow_prev: None,
            motion_mask: None,
            flat_mask: None,
            object_visible: false,
            id: format!("{} {}", e.folder, e.frame),
        })
    }
}

impl Iterator for KittiSequence {
    type Item = Result<FrameSample>;

    /// Missing files end up as errors; undecodable images are skipped with
    /// a warning.
    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let e = self.entries.next()?;
            match self.read_sample(&e) {
                Err(Error::Image { path, source }) => {
                    log::warn!("skipping {}: {source}", path.display());
                }
                other => return Some(other),
            }
        }
    }
}

/// Reads `P_rect_02` (or `_03`) from a KITTI calibration file.
fn read_calibration(path: &Path, camera: &str) -> Result<CameraIntrinsics> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let key = if camera == "image_03" { "P_rect_03:" } else { "P_rect_02:" };
    let line = text
        .lines()
        .find(|l| l.starts_with(key))
        .ok_or_else(|| Error::format(path, format!("no `{key}` entry")))?;
    let v: Vec<f64> = line[key.len()..]
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::format(path, format!("unparsable `{key}` entry")))?;
    if v.len() != 12 {
        return Err(Error::format(path, format!("`{key}` has {} values, expected 12", v.len())));
    }
    CameraIntrinsics::new(v[0], v[5], v[2], v[6]).map_err(|e| Error::format(path, e.to_string()))
}

fn write_png_rgb(path: &Path, img: &ImageGrid) -> Result<()> {
    let (w, h) = (img.width(), img.height());
    let buf = ImageBuffer::<Rgb<u8>, _>::from_fn(w as u32, h as u32, |x, y| {
        let px = |c| (img.tensor().at(c, y as usize, x as usize) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    });
    buf.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

fn write_png_depth(path: &Path, d: &DepthMap) -> Result<()> {
    let (w, h) = (d.width(), d.height());
    let buf = ImageBuffer::<Luma<u16>, _>::from_fn(w as u32, h as u32, |x, y| {
        Luma([(d.at(y as usize, x as usize) * 256.0).round().clamp(1.0, 65535.0) as u16])
    });
    buf.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Writes `frames` as a one-drive KITTI raw sequence with a split file named
/// `split` listing every frame that has both neighbours. Images are
/// quantised to 8 bits, depths to 1/256 m.
pub fn export_kitti_sequence(
    root: &Path,
    split: &str,
    frames: &[ImageGrid],
    depths: Option<&[DepthMap]>,
    k: &CameraIntrinsics,
) -> Result<()> {
    let date = "2000_01_01";
    let folder = format!("{date}/{date}_drive_0001_sync");
    let img_dir = root.join(&folder).join("image_02/data");
    let depth_dir = root.join(&folder).join("proj_depth/groundtruth/image_02");
    let splits = root.join("splits");
    for dir in [&img_dir, &depth_dir, &splits] {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let calib = root.join(date).join("calib_cam_to_cam.txt");
    let text = format!(
        "P_rect_02: {:e} 0 {:e} 0 0 {:e} {:e} 0 0 0 1 0\n",
        k.fx, k.cx, k.fy, k.cy
    );
    fs::write(&calib, text).map_err(|e| Error::io(&calib, e))?;
    for (i, f) in frames.iter().enumerate() {
        write_png_rgb(&img_dir.join(format!("{i:010}.png")), f)?;
    }
    if let Some(depths) = depths {
        for (i, d) in depths.iter().enumerate() {
            write_png_depth(&depth_dir.join(format!("{i:010}.png")), d)?;
        }
    }
    let lines: String = (1..frames.len().saturating_sub(1)).map(|i| format!("{folder} {i} l\n")).collect();
    let sp = splits.join(format!("{split}.txt"));
    fs::write(&sp, lines).map_err(|e| Error::io(&sp, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{SceneConfig, SyntheticSequence};

    fn quantise(img: &ImageGrid) -> ImageGrid {
        ImageGrid::new(img.tensor().map(|v| (v * 255.0).round() / 255.0)).unwrap()
    }

    #[test]
    fn empty_split_gives_empty_stream() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("splits")).unwrap();
        fs::write(dir.path().join("splits/empty.txt"), "").unwrap();
        assert_eq!(load_kitti_sequence(dir.path(), "empty").unwrap().count(), 0);
    }

    #[test]
    fn missing_split_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_kitti_sequence(dir.path(), "eigen").err().unwrap().to_string();
        assert!(err.contains("splits/eigen.txt"), "{err}");
    }

    #[test]
    fn exported_sequence_reloads_identically() {
        let seq = SyntheticSequence::new(&SceneConfig { frames: 4, ..SceneConfig::textured(1) }).unwrap();
        let frames: Vec<ImageGrid> = seq.frames.iter().map(|f| quantise(&f.image)).collect();
        let depths: Vec<DepthMap> = seq
            .frames
            .iter()
            .map(|f| DepthMap::new(f.depth.tensor().map(|v| (v * 256.0).round() / 256.0)).unwrap())
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let k = seq.scene.intrinsics;
        export_kitti_sequence(dir.path(), "mini", &frames, Some(&depths), &k).unwrap();
        let loaded: Vec<FrameSample> = KittiSequence::open(dir.path(), "mini", 192, 64)
            .unwrap()
            .collect::<Result<_>>()
            .unwrap();
        assert_eq!(loaded.len(), 2);
        for (i, s) in loaded.iter().enumerate() {
            assert_eq!(s.prev, frames[i]);
            assert_eq!(s.target, frames[i + 1]);
            assert_eq!(s.next, frames[i + 2]);
            assert_eq!(s.depth.as_ref().unwrap(), &depths[i + 1]);
            assert_eq!(s.depth_valid.as_ref().unwrap().count(), 64 * 192);
            assert!((s.intrinsics.fx - k.fx).abs() < 1e-9 * k.fx);
        }
        // resizing to half size halves the intrinsics
        let half: Vec<FrameSample> = KittiSequence::open(dir.path(), "mini", 96, 32).unwrap().collect::<Result<_>>().unwrap();
        let kh = half[0].intrinsics;
        assert!((kh.fx - k.fx / 2.0).abs() < 1e-6 && (kh.cx - k.cx / 2.0).abs() < 1e-6);
        assert!((kh.fy - k.fy / 2.0).abs() < 1e-6 && (kh.cy - k.cy / 2.0).abs() < 1e-6);
    }

    #[test]
    fn corrupt_images_are_skipped_and_missing_ones_reported() {
        let seq = SyntheticSequence::new(&SceneConfig { frames: 5, ..SceneConfig::textured(2) }).unwrap();
        let frames: Vec<ImageGrid> = seq.frames.iter().map(|f| f.image.clone()).collect();
        let dir = tempfile::tempdir().unwrap();
        export_kitti_sequence(dir.path(), "s", &frames, None, &seq.scene.intrinsics).unwrap();
        let data = dir.path().join("2000_01_01/2000_01_01_drive_0001_sync/image_02/data");
        fs::write(data.join(format!("{:010}.png", 2)), b"not a png").unwrap();
        let out: Vec<Result<FrameSample>> = KittiSequence::open(dir.path(), "s", 192, 64).unwrap().collect();
        // frame 2 is corrupt as a target and as a neighbour of 1 and 3
        assert!(out.is_empty(), "{} samples", out.len());

        fs::remove_file(data.join(format!("{:010}.png", 3))).unwrap();
        fs::write(dir.path().join("splits/s.txt"), "2000_01_01/2000_01_01_drive_0001_sync 3 l\n").unwrap();
        let err = KittiSequence::open(dir.path(), "s", 192, 64).unwrap().next().unwrap().err().unwrap();
        assert!(err.to_string().contains("0000000003.png"), "{err}");
    }

    #[test]
    fn bad_split_lines_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("splits")).unwrap();
        fs::write(dir.path().join("splits/bad.txt"), "folder notanumber l\n").unwrap();
        assert!(load_kitti_sequence(dir.path(), "bad").is_err());
    }
}
