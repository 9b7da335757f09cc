//! Manifest-driven multi-view datasets and the pseudo-HR label provider.
//!
//! A manifest is a TOML file:
//!
//! ```toml
//! sr_factor = 2
//!
//! [[views]]
//! name = "view_000"
//! lr_image = "lr/view_000.png"
//! pseudo_hr_image = "pseudo/view_000.png"   # optional
//! hr_image = "hr/view_000.png"              # optional, evaluation only
//! [views.camera]
//! fx = 38.4
//! fy = 38.4
//! cx = 16.0
//! cy = 16.0
//! width = 32
//! height = 32
//! rotation = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
//! translation = [0.0, 0.0, 3.0]
//! ```
//!
//! Image paths are relative to the manifest's directory.

use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{bicubic_upsample, ImageBuffer};
use crate::scene::Camera;
use crate::train::TrainView;

/// Every `TEST_EVERY`-th view (starting at index 0) is held out.
pub const TEST_EVERY: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestView {
    pub name: String,
    pub camera: Camera,
    pub lr_image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudo_hr_image: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hr_image: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub sr_factor: usize,
    pub views: Vec<ManifestView>,
}

impl Manifest {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }
}

#[derive(Clone, Debug)]
pub struct View {
    pub name: String,
    pub camera: Camera,
    pub lr: ImageBuffer,
    pub pseudo_hr: Option<ImageBuffer>,
    pub hr: Option<ImageBuffer>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub sr_factor: usize,
    pub views: Vec<View>,
}

pub fn is_test_index(i: usize) -> bool {
    i % TEST_EVERY == 0
}

fn check_size(path: &Path, img: &ImageBuffer, expected: (usize, usize)) -> Result<()> {
    if (img.height, img.width) != expected {
        return Err(Error::ResolutionMismatch {
            path: path.to_path_buf(),
            expected,
            got: (img.height, img.width),
        });
    }
    Ok(())
}

/// Loads a manifest and every image it references. Missing pseudo-HR images
/// are logged and left to the bicubic fallback.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(manifest_path)
        .map_err(|e| Error::BadManifest(format!("{}: {e}", manifest_path.display())))?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| Error::BadManifest(e.to_string()))?;
    if manifest.sr_factor == 0 {
        return Err(Error::BadManifest("sr_factor must be positive".into()));
    }
    if manifest.views.is_empty() {
        return Err(Error::BadManifest("no views".into()));
    }
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let f = manifest.sr_factor;
    let mut lr_size = None;
    let mut views = Vec::with_capacity(manifest.views.len());
    for mv in manifest.views {
        mv.camera
            .validate()
            .map_err(|e| Error::BadManifest(format!("view {}: {e}", mv.name)))?;
        let lr_path = root.join(&mv.lr_image);
        let lr = ImageBuffer::load_png(&lr_path)?;
        let size = *lr_size.get_or_insert((lr.height, lr.width));
        check_size(&lr_path, &lr, size)?;
        check_size(&lr_path, &lr, (mv.camera.height, mv.camera.width))?;
        let hr_size = (size.0 * f, size.1 * f);
        let pseudo_hr = match &mv.pseudo_hr_image {
            Some(p) => {
                let path = root.join(p);
                if path.exists() {
                    let img = ImageBuffer::load_png(&path)?;
                    check_size(&path, &img, hr_size)?;
                    Some(img)
                } else {
                    warn!("pseudo-HR image {} missing; using bicubic upsampling", path.display());
                    None
                }
            }
            None => None,
        };
        let hr = match &mv.hr_image {
            Some(p) => {
                let path = root.join(p);
                let img = ImageBuffer::load_png(&path)?;
                check_size(&path, &img, hr_size)?;
                Some(img)
            }
            None => None,
        };
        views.push(View {
            name: mv.name,
            camera: mv.camera,
            lr,
            pseudo_hr,
            hr,
        });
    }
    if views.iter().all(|v| v.pseudo_hr.is_none()) {
        warn!("no pseudo-HR images available; all labels come from bicubic upsampling");
    }
    Ok(Dataset { sr_factor: f, views })
}

/// The on-disk pseudo label, or a Catmull-Rom upsampling of the LR image.
pub fn pseudo_hr(view: &View, factor: usize) -> ImageBuffer {
    match &view.pseudo_hr {
        Some(img) => img.clone(),
        None if factor == 1 => view.lr.clone(),
        None => bicubic_upsample(&view.lr, factor),
    }
}

impl Dataset {
    pub fn train_indices(&self) -> Vec<usize> {
        (0..self.views.len()).filter(|i| !is_test_index(*i)).collect()
    }

    pub fn test_indices(&self) -> Vec<usize> {
        (0..self.views.len()).filter(|i| is_test_index(*i)).collect()
    }

    pub fn train_views(&self) -> Vec<TrainView> {
        self.train_indices()
            .into_iter()
            .map(|i| {
                let v = &self.views[i];
                TrainView {
                    camera: v.camera.clone(),
                    gt_lr: v.lr.clone(),
                    pseudo_hr: pseudo_hr(v, self.sr_factor),
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    fn camera(w: usize, h: usize) -> Camera {
        Camera::look_at(Vector3::new(0.0, 0.0, -3.0), Vector3::zeros(), Vector3::new(0.0, -1.0, 0.0), 10.0, 10.0, w, h)
    }

    fn write_dataset(dir: &Path, n: usize, pseudo: Option<(usize, usize)>) -> PathBuf {
        std::fs::create_dir_all(dir.join("lr")).unwrap();
        std::fs::create_dir_all(dir.join("pseudo")).unwrap();
        let mut views = Vec::new();
        for i in 0..n {
            let lr = ImageBuffer::from_fn(4, 6, 3, |y, x, c| ((y + x + c + i) % 5) as f64 / 4.0);
            let name = format!("v{i:02}");
            lr.save_png(&dir.join(format!("lr/{name}.png"))).unwrap();
            if let Some((h, w)) = pseudo {
                ImageBuffer::filled(h, w, 3, 0.5)
                    .save_png(&dir.join(format!("pseudo/{name}.png")))
                    .unwrap();
            }
            views.push(ManifestView {
                name: name.clone(),
                camera: camera(6, 4),
                lr_image: format!("lr/{name}.png").into(),
                pseudo_hr_image: Some(format!("pseudo/{name}.png").into()),
                hr_image: None,
            });
        }
        let m = Manifest { sr_factor: 2, views };
        let path = dir.join("manifest.toml");
        std::fs::write(&path, m.to_toml()).unwrap();
        path
    }

    #[test]
    fn every_eighth_view_is_held_out() {
        let dir = tempfile::tempdir().unwrap();
        let ds = load_dataset(&write_dataset(dir.path(), 16, Some((8, 12)))).unwrap();
        assert_eq!(ds.test_indices(), vec![0, 8]);
        assert_eq!(ds.train_indices().len(), 14);
        assert!(ds.views.iter().all(|v| v.pseudo_hr.is_some()));
    }

    #[test]
    fn missing_pseudo_labels_fall_back_to_bicubic() {
        let dir = tempfile::tempdir().unwrap();
        let ds = load_dataset(&write_dataset(dir.path(), 3, None)).unwrap();
        assert!(ds.views.iter().all(|v| v.pseudo_hr.is_none()));
        let tv = ds.train_views();
        assert_eq!(tv[0].pseudo_hr, bicubic_upsample(&ds.views[1].lr, 2));
    }

    #[test]
    fn wrong_pseudo_size_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_dataset(&write_dataset(dir.path(), 2, Some((8, 8)))).unwrap_err();
        assert!(matches!(err, Error::ResolutionMismatch { expected: (8, 12), got: (8, 8), .. }));
    }

    #[test]
    fn missing_lr_image_and_bad_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_dataset(dir.path(), 2, None);
        std::fs::remove_file(dir.path().join("lr/v01.png")).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::MissingImage(_))));
        std::fs::write(&path, "sr_factor = 2\nbogus = 1\n").unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::BadManifest(_))));
    }

    #[test]
    fn pseudo_provider_examples() {
        let lr = ImageBuffer::from_fn(5, 5, 3, |y, x, _| (y * 5 + x) as f64 / 25.0);
        let v = View {
            name: "a".into(),
            camera: camera(5, 5),
            lr: lr.clone(),
            pseudo_hr: None,
            hr: None,
        };
        assert_eq!(pseudo_hr(&v, 1), lr);
        let c = View {
            lr: ImageBuffer::filled(5, 5, 3, 0.3),
            ..v
        };
        assert!(pseudo_hr(&c, 2).data.iter().all(|p| (p - 0.3).abs() < 1e-12));
    }
}
