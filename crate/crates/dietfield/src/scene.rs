//! Posed multi-view datasets in the NeRF synthetic convention and per-pixel
//! camera rays.
//!
//! A scene directory holds a `transforms.json` (`camera_angle_x` plus one
//! `frames[]` entry per view with `file_path` and a 4x4 `transform_matrix`)
//! and the referenced PNG images. Cameras look down `-z` in camera space with
//! `+x` right and `+y` up, so published synthetic datasets load unmodified.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed {path}: {msg}")]
    Malformed { path: PathBuf, msg: String },
    #[error("failed to decode image {path}: {source}")]
    Image {
        path: PathBuf,
        source: image::ImageError,
    },
    #[error("frame {index}: rotation is not orthonormal with det +1 (max deviation {deviation})")]
    BadRotation { index: usize, deviation: f32 },
    #[error("frame {index}: image is {got_w}x{got_h}, expected {want_w}x{want_h}")]
    SizeMismatch {
        index: usize,
        got_w: usize,
        got_h: usize,
        want_w: usize,
        want_h: usize,
    },
    #[error("view subsample k={k} out of range 1..={n}")]
    SubsampleRange { k: usize, n: usize },
    #[error("invalid scene bounds: near={near}, far={far}")]
    BadBounds { near: f32, far: f32 },
}

/// Pinhole camera shared by every view of a scene.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub height: usize,
    pub width: usize,
    /// Focal length in pixels: `0.5 * width / tan(0.5 * camera_angle_x)`.
    pub focal: f32,
}

/// Rigid camera-to-world transform. The rotation block is orthonormal with
/// det +1 (within 1e-4) and the last row is (0,0,0,1).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    /// Row-major 4x4 camera-to-world matrix.
    pub camera_to_world: [[f32; 4]; 4],
}

impl Pose {
    pub fn identity() -> Pose {
        let mut m = [[0.0; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        Pose { camera_to_world: m }
    }

    pub fn from_rotation_translation(r: [[f32; 3]; 3], t: [f32; 3]) -> Pose {
        let mut m = [[0.0; 4]; 4];
        for i in 0..3 {
            m[i][..3].copy_from_slice(&r[i]);
            m[i][3] = t[i];
        }
        m[3][3] = 1.0;
        Pose { camera_to_world: m }
    }

    pub fn translation(&self) -> [f32; 3] {
        [
            self.camera_to_world[0][3],
            self.camera_to_world[1][3],
            self.camera_to_world[2][3],
        ]
    }

    pub fn rotation(&self) -> [[f32; 3]; 3] {
        let m = &self.camera_to_world;
        [
            [m[0][0], m[0][1], m[0][2]],
            [m[1][0], m[1][1], m[1][2]],
            [m[2][0], m[2][1], m[2][2]],
        ]
    }

    /// Max deviation of R^T R from identity combined with the det +1
    /// requirement. `Ok` carries the deviation when the pose is acceptable.
    pub fn validate(&self, tolerance: f32) -> Result<f32, f32> {
        let r = self.rotation();
        let mut deviation = 0.0f32;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f32 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                deviation = deviation.max((dot - expect).abs());
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        deviation = deviation.max((det - 1.0).abs());
        if !self.translation().iter().all(|v| v.is_finite()) {
            return Err(f32::INFINITY);
        }
        if deviation <= tolerance {
            Ok(deviation)
        } else {
            Err(deviation)
        }
    }

    /// Applies the rotation block to a camera-space vector.
    pub fn rotate(&self, v: [f32; 3]) -> [f32; 3] {
        let r = self.rotation();
        [
            r[0][0] * v[0] + r[0][1] * v[1] + r[0][2] * v[2],
            r[1][0] * v[0] + r[1][1] * v[1] + r[1][2] * v[2],
            r[2][0] * v[0] + r[2][1] * v[1] + r[2][2] * v[2],
        ]
    }
}

/// One observed view: pixels in [0,1] with alpha already composited onto the
/// dataset background, plus its camera pose.
#[derive(Clone, Debug)]
pub struct PosedImage {
    /// Row-major H*W*3 values in [0,1].
    pub image: Vec<f32>,
    pub pose: Pose,
}

#[derive(Clone, Debug)]
pub struct SceneDataset {
    pub intrinsics: CameraIntrinsics,
    pub views: Vec<PosedImage>,
    pub near: f32,
    pub far: f32,
    pub background: [f32; 3],
}

impl SceneDataset {
    pub fn pixel(&self, view: usize, row: usize, col: usize) -> [f32; 3] {
        let idx = (row * self.intrinsics.width + col) * 3;
        let img = &self.views[view].image;
        [img[idx], img[idx + 1], img[idx + 2]]
    }
}

/// A batch of world-space rays; directions are unit length.
#[derive(Clone, Debug)]
pub struct RayBundle {
    /// N x 3 origins, flattened.
    pub origins: Vec<f32>,
    /// N x 3 unit directions, flattened.
    pub directions: Vec<f32>,
    /// Source pixel (row, col) per ray, when rays came from a pixel grid.
    pub pixels: Option<Vec<(usize, usize)>>,
}

impl RayBundle {
    pub fn len(&self) -> usize {
        self.origins.len() / 3
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn origin(&self, i: usize) -> [f32; 3] {
        [
            self.origins[3 * i],
            self.origins[3 * i + 1],
            self.origins[3 * i + 2],
        ]
    }

    pub fn direction(&self, i: usize) -> [f32; 3] {
        [
            self.directions[3 * i],
            self.directions[3 * i + 1],
            self.directions[3 * i + 2],
        ]
    }

    /// Sub-bundle for rays `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> RayBundle {
        RayBundle {
            origins: self.origins[3 * start..3 * end].to_vec(),
            directions: self.directions[3 * start..3 * end].to_vec(),
            pixels: self.pixels.as_ref().map(|p| p[start..end].to_vec()),
        }
    }
}

/// Knobs applied while loading a scene; the dataset convention leaves
/// near/far and background to the experimenter.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LoadOptions {
    pub near: f32,
    pub far: f32,
    pub background: [f32; 3],
    /// Integer box-filter downsample factor (2 maps 800x800 inputs to the
    /// 400x400 training convention). 1 keeps images as stored.
    pub downsample: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            near: 2.0,
            far: 6.0,
            background: [1.0, 1.0, 1.0],
            downsample: 1,
        }
    }
}

pub const ROTATION_TOLERANCE: f32 = 1e-4;

#[derive(Deserialize)]
struct TransformsFile {
    camera_angle_x: f32,
    frames: Vec<FrameEntry>,
}

#[derive(Deserialize)]
struct FrameEntry {
    file_path: String,
    transform_matrix: [[f32; 4]; 4],
}

/// Loads `transforms.json` plus referenced PNGs from `dir`.
pub fn load_scene(dir: &Path, options: &LoadOptions) -> Result<SceneDataset, SceneError> {
    load_scene_file(dir, "transforms.json", options)
}

/// Like [`load_scene`] but reading an alternate transforms file, e.g.
/// `transforms_test.json` for a held-out split.
pub fn load_scene_file(
    dir: &Path,
    transforms_name: &str,
    options: &LoadOptions,
) -> Result<SceneDataset, SceneError> {
    if !(options.near > 0.0 && options.near < options.far) {
        return Err(SceneError::BadBounds {
            near: options.near,
            far: options.far,
        });
    }
    let tpath = dir.join(transforms_name);
    let text = std::fs::read_to_string(&tpath).map_err(|source| SceneError::Io {
        path: tpath.clone(),
        source,
    })?;
    let transforms: TransformsFile =
        serde_json::from_str(&text).map_err(|e| SceneError::Malformed {
            path: tpath.clone(),
            msg: e.to_string(),
        })?;
    if transforms.frames.is_empty() {
        return Err(SceneError::Malformed {
            path: tpath,
            msg: "no frames".to_string(),
        });
    }

    let ds = options.downsample.max(1);
    let mut views = Vec::with_capacity(transforms.frames.len());
    let mut size: Option<(usize, usize)> = None;
    for (index, frame) in transforms.frames.iter().enumerate() {
        let pose = Pose {
            camera_to_world: frame.transform_matrix,
        };
        if let Err(deviation) = pose.validate(ROTATION_TOLERANCE) {
            return Err(SceneError::BadRotation { index, deviation });
        }

        let mut img_path = dir.join(&frame.file_path);
        if img_path.extension().is_none() {
            img_path.set_extension("png");
        }
        let decoded = image::open(&img_path).map_err(|source| SceneError::Image {
            path: img_path.clone(),
            source,
        })?;
        let rgba = decoded.to_rgba8();
        let (w0, h0) = (rgba.width() as usize, rgba.height() as usize);
        let composited = composite_onto_background(rgba.as_raw(), options.background);
        let (image, w, h) = if ds > 1 {
            (box_downsample(&composited, w0, h0, ds), w0 / ds, h0 / ds)
        } else {
            (composited, w0, h0)
        };

        match size {
            None => size = Some((w, h)),
            Some((want_w, want_h)) => {
                if (w, h) != (want_w, want_h) {
                    return Err(SceneError::SizeMismatch {
                        index,
                        got_w: w,
                        got_h: h,
                        want_w,
                        want_h,
                    });
                }
            }
        }
        views.push(PosedImage { image, pose });
    }

    let (width, height) = size.expect("at least one frame");
    let focal = 0.5 * width as f32 / (0.5 * transforms.camera_angle_x).tan();
    Ok(SceneDataset {
        intrinsics: CameraIntrinsics {
            height,
            width,
            focal,
        },
        views,
        near: options.near,
        far: options.far,
        background: options.background,
    })
}

fn composite_onto_background(rgba: &[u8], background: [f32; 3]) -> Vec<f32> {
    let mut out = Vec::with_capacity(rgba.len() / 4 * 3);
    for px in rgba.chunks_exact(4) {
        let a = px[3] as f32 / 255.0;
        for c in 0..3 {
            let v = px[c] as f32 / 255.0;
            out.push(v * a + background[c] * (1.0 - a));
        }
    }
    out
}

fn box_downsample(img: &[f32], w: usize, h: usize, factor: usize) -> Vec<f32> {
    let (ow, oh) = (w / factor, h / factor);
    let norm = 1.0 / (factor * factor) as f32;
    let mut out = vec![0.0f32; ow * oh * 3];
    for oy in 0..oh {
        for ox in 0..ow {
            let mut acc = [0.0f32; 3];
            for dy in 0..factor {
                for dx in 0..factor {
                    let src = ((oy * factor + dy) * w + ox * factor + dx) * 3;
                    for c in 0..3 {
                        acc[c] += img[src + c];
                    }
                }
            }
            let dst = (oy * ow + ox) * 3;
            for c in 0..3 {
                out[dst + c] = acc[c] * norm;
            }
        }
    }
    out
}

/// The indices chosen by [`subsample_views`]: `k` drawn uniformly without
/// replacement, in ascending order, deterministic per seed.
pub fn subsample_indices(n: usize, k: usize, seed: u64) -> Result<Vec<usize>, SceneError> {
    if k == 0 || k > n {
        return Err(SceneError::SubsampleRange { k, n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(&mut rng);
    let mut chosen = indices[..k].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Keeps `k` views chosen uniformly without replacement, preserving dataset
/// order. The few-shot protocol draws its training split this way.
pub fn subsample_views(
    dataset: &SceneDataset,
    k: usize,
    seed: u64,
) -> Result<SceneDataset, SceneError> {
    let chosen = subsample_indices(dataset.views.len(), k, seed)?;
    Ok(SceneDataset {
        intrinsics: dataset.intrinsics,
        views: chosen.iter().map(|&i| dataset.views[i].clone()).collect(),
        near: dataset.near,
        far: dataset.far,
        background: dataset.background,
    })
}

/// Camera-space direction for pixel (row, col); the camera looks down -z and
/// pixel centers sit at half-integer offsets.
fn pixel_direction(intrinsics: &CameraIntrinsics, row: usize, col: usize) -> [f32; 3] {
    let x = (col as f32 + 0.5 - intrinsics.width as f32 / 2.0) / intrinsics.focal;
    let y = -(row as f32 + 0.5 - intrinsics.height as f32 / 2.0) / intrinsics.focal;
    [x, y, -1.0]
}

/// One ray per pixel, row-major over the image grid.
pub fn camera_rays(intrinsics: &CameraIntrinsics, pose: &Pose) -> RayBundle {
    strided_rays(intrinsics, pose, 1)
}

/// Rays for pixels with both coordinates divisible by `stride`, row-major, so
/// the result reshapes to a ceil(H/stride) x ceil(W/stride) image covering
/// the full extent of the image plane.
pub fn strided_rays(intrinsics: &CameraIntrinsics, pose: &Pose, stride: usize) -> RayBundle {
    let stride = stride.max(1);
    let rows = intrinsics.height.div_ceil(stride);
    let cols = intrinsics.width.div_ceil(stride);
    let n = rows * cols;
    let origin = pose.translation();
    let mut origins = Vec::with_capacity(n * 3);
    let mut directions = Vec::with_capacity(n * 3);
    let mut pixels = Vec::with_capacity(n);
    for r in 0..rows {
        for c in 0..cols {
            let (row, col) = (r * stride, c * stride);
            let d = pose.rotate(pixel_direction(intrinsics, row, col));
            let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            origins.extend_from_slice(&origin);
            directions.extend_from_slice(&[d[0] / norm, d[1] / norm, d[2] / norm]);
            pixels.push((row, col));
        }
    }
    RayBundle {
        origins,
        directions,
        pixels: Some(pixels),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_intrinsics(size: usize, focal: f32) -> CameraIntrinsics {
        CameraIntrinsics {
            height: size,
            width: size,
            focal,
        }
    }

    #[test]
    fn center_pixel_of_identity_pose_points_down_negative_z() {
        // Odd size puts a pixel center exactly on the principal axis.
        let intr = square_intrinsics(3, 1.0);
        let rays = camera_rays(&intr, &Pose::identity());
        let d = rays.direction(3 + 1);
        assert!((d[0]).abs() < 1e-6 && (d[1]).abs() < 1e-6);
        assert!((d[2] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn corner_pixel_direction_matches_formula() {
        // 2x2 image, focal 1: pixel (0,0) center is (0.5, 0.5), so the
        // unnormalized camera-space direction is (-0.5, 0.5, -1).
        let intr = square_intrinsics(2, 1.0);
        let rays = camera_rays(&intr, &Pose::identity());
        let d = rays.direction(0);
        let norm = (0.5f32 * 0.5 + 0.5 * 0.5 + 1.0).sqrt();
        assert!((d[0] - (-0.5 / norm)).abs() < 1e-6);
        assert!((d[1] - (0.5 / norm)).abs() < 1e-6);
        assert!((d[2] - (-1.0 / norm)).abs() < 1e-6);
    }

    #[test]
    fn all_directions_unit_norm() {
        let intr = square_intrinsics(16, 20.0);
        let rays = camera_rays(&intr, &Pose::identity());
        for i in 0..rays.len() {
            let d = rays.direction(i);
            let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn stride_one_matches_camera_rays_and_strides_subset() {
        let intr = square_intrinsics(8, 10.0);
        let pose = Pose::identity();
        let full = camera_rays(&intr, &pose);
        let s1 = strided_rays(&intr, &pose, 1);
        assert_eq!(full.directions, s1.directions);

        let s2 = strided_rays(&intr, &pose, 2);
        assert_eq!(s2.len(), 16);
        let pix = s2.pixels.as_ref().unwrap();
        for (i, &(r, c)) in pix.iter().enumerate() {
            assert_eq!(r % 2, 0);
            assert_eq!(c % 2, 0);
            let j = r * 8 + c;
            assert_eq!(s2.direction(i), full.direction(j));
        }
    }

    #[test]
    fn stride_counts_on_400() {
        let intr = square_intrinsics(400, 200.0);
        assert_eq!(strided_rays(&intr, &Pose::identity(), 5).len(), 6400);
        assert_eq!(strided_rays(&intr, &Pose::identity(), 2).len(), 40_000);
    }

    #[test]
    fn subsample_is_deterministic_and_in_range() {
        let a = subsample_indices(100, 8, 42).unwrap();
        let b = subsample_indices(100, 8, 42).unwrap();
        assert_eq!(a, b);
        let c = subsample_indices(100, 8, 43).unwrap();
        assert_ne!(a, c);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert!(a.iter().all(|&i| i < 100));
        assert!(subsample_indices(100, 0, 1).is_err());
        assert!(subsample_indices(100, 101, 1).is_err());
    }

    #[test]
    fn subsample_is_uniform_over_seeds() {
        // 10k draws of 8 from 100: each index should appear with frequency
        // 0.08 +- 0.01.
        let mut counts = vec![0usize; 100];
        let draws = 10_000;
        for seed in 0..draws {
            for i in subsample_indices(100, 8, seed as u64).unwrap() {
                counts[i] += 1;
            }
        }
        for &c in &counts {
            let freq = c as f32 / draws as f32;
            assert!((freq - 0.08).abs() < 0.01, "frequency {freq}");
        }
    }

    #[test]
    fn reflection_pose_is_rejected() {
        let mut m = Pose::identity();
        m.camera_to_world[0][0] = -1.0; // det = -1
        assert!(m.validate(ROTATION_TOLERANCE).is_err());
    }
}
