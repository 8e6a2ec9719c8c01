//! Simulated linear-array ultrasound renderer.
//!
//! Frames are speckled tissue with vessels drawn as dark soft-edged
//! ellipses. The lateral pixel axis and probe displacement are linked by
//! the linear map `dy = a * du` where `a` is the probe's meters-per-pixel
//! constant; [`pixel_to_lateral`] / [`lateral_to_pixel`] expose the map
//! exactly. Below a minimum contact force the image degrades by blacking
//! out a force-dependent fraction of columns, mimicking lost acoustic
//! coupling. A coarse masked depth image stands in for the wrist camera.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arm::Pose;
use crate::phantom::{ContactState, PlacedPhantom};

/// Linear-array probe parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    /// Lateral footprint of the array, m.
    pub footprint_width: f64,
    /// Imaging depth covered by the full image height, m.
    pub imaging_depth: f64,
    pub image_width_px: usize,
    pub image_height_px: usize,
    /// Contact force below which the image degrades, N.
    pub min_contact_force: f64,
    /// Multiplicative speckle amplitude in [0, 1].
    pub speckle_level: f64,
}

impl Default for ProbeModel {
    fn default() -> Self {
        ProbeModel {
            footprint_width: 0.04,
            imaging_depth: 0.04,
            image_width_px: 64,
            image_height_px: 64,
            min_contact_force: 0.5,
            speckle_level: 0.35,
        }
    }
}

impl ProbeModel {
    /// Lateral meters per pixel; exactly `footprint_width / image_width_px`.
    pub fn a(&self) -> f64 {
        self.footprint_width / self.image_width_px as f64
    }
}

/// The linear imaging map: probe displacement for a pixel shift.
pub fn pixel_to_lateral(probe: &ProbeModel, du: f64) -> f64 {
    probe.a() * du
}

/// Exact inverse of [`pixel_to_lateral`].
pub fn lateral_to_pixel(probe: &ProbeModel, dy: f64) -> f64 {
    dy / probe.a()
}

/// One grayscale ultrasound frame, row-major, values in [0, 1].
#[derive(Debug, Clone)]
pub struct UltrasoundFrame {
    pub pixels: Vec<f32>,
    pub width: usize,
    pub height: usize,
    pub timestamp: f64,
}

impl UltrasoundFrame {
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width + col]
    }

    /// Quantize to 8-bit for storage; metrics operate on the stored bytes.
    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_u8(bytes: &[u8], width: usize, height: usize, timestamp: f64) -> UltrasoundFrame {
        UltrasoundFrame {
            pixels: bytes.iter().map(|b| *b as f32 / 255.0).collect(),
            width,
            height,
            timestamp,
        }
    }
}

/// Ground-truth landmark label for a rendered frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LandmarkTruth {
    pub visible: bool,
    /// Normalized lateral position of the (first) artery center in [0, 1].
    pub l: f64,
    /// Number of vessels cut by the imaging plane (0, 1 or 2).
    pub n_vessels: usize,
}

impl LandmarkTruth {
    pub fn none() -> LandmarkTruth {
        LandmarkTruth {
            visible: false,
            l: 0.0,
            n_vessels: 0,
        }
    }
}

/// Render one frame plus its ground truth.
///
/// Deterministic given `rng_seed`. The vessel centers come from the
/// phantom's cross-section query; the landmark `l` is the first vessel's
/// center column under the linear map. If the normal contact force is
/// below `min_contact_force`, a `1 - F/min` fraction of columns blacks
/// out and the landmark is invisible when its column is occluded.
pub fn render(
    phantom: &PlacedPhantom,
    probe_pose: &Pose,
    contact: &ContactState,
    probe: &ProbeModel,
    timestamp: f64,
    rng_seed: u64,
) -> (UltrasoundFrame, LandmarkTruth) {
    let w = probe.image_width_px;
    let h = probe.image_height_px;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);

    // column blackout pattern first so the draw order is fixed
    let force = contact.measured_wrench().force.z.max(0.0);
    let black_frac = (1.0 - force / probe.min_contact_force).clamp(0.0, 1.0);
    let blacked: Vec<bool> = (0..w).map(|_| rng.gen::<f64>() < black_frac).collect();

    let sections = phantom.artery_cross_section(probe_pose, probe.footprint_width, probe.imaging_depth);

    let mut pixels = vec![0.0f32; w * h];
    let px_w = probe.footprint_width / w as f64;
    let px_h = probe.imaging_depth / h as f64;
    let edge = 0.75 * px_w; // soft vessel edge width
    for r in 0..h {
        for c in 0..w {
            let noise: f64 = rng.gen_range(-1.0..1.0);
            if blacked[c] {
                continue;
            }
            let lat = (c as f64 + 0.5) * px_w - probe.footprint_width / 2.0;
            let dep = (r as f64 + 0.5) * px_h;
            // near-field skin band is brighter than deep tissue
            let mut base = if dep < 0.004 { 0.78 } else { 0.55 - 0.9 * dep };
            for (center, radius) in &sections {
                let d = ((lat - center.x).powi(2) + (dep - center.y).powi(2)).sqrt();
                if d < radius + edge {
                    let t = ((d - (radius - edge)) / (2.0 * edge)).clamp(0.0, 1.0);
                    base = 0.05 + t * (base - 0.05);
                }
            }
            let v = base * (1.0 + probe.speckle_level * noise);
            pixels[r * w + c] = (v as f32).clamp(0.0, 1.0);
        }
    }

    let truth = match sections.first() {
        None => LandmarkTruth::none(),
        Some((center, _)) => {
            let l = 0.5 + center.x / probe.footprint_width;
            let col = ((l * w as f64).floor() as i64).clamp(0, w as i64 - 1) as usize;
            let in_frame = (0.0..=1.0).contains(&l);
            LandmarkTruth {
                visible: in_frame && !blacked[col],
                l: l.clamp(0.0, 1.0),
                n_vessels: sections.len().min(2),
            }
        }
    };

    (
        UltrasoundFrame {
            pixels,
            width: w,
            height: h,
            timestamp,
        },
        truth,
    )
}

/// Probe-mounted depth camera stand-in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub image_width_px: usize,
    pub image_height_px: usize,
    /// Square field of view at the probe plane, m.
    pub extent: f64,
    /// Depths beyond this are masked to zero, m.
    pub depth_threshold: f64,
    /// Multiplicative sensor noise amplitude.
    pub noise_level: f64,
}

impl Default for CameraModel {
    fn default() -> Self {
        CameraModel {
            image_width_px: 32,
            image_height_px: 32,
            extent: 0.09,
            depth_threshold: 0.12,
            noise_level: 0.05,
        }
    }
}

/// Coarse orthographic depth image of the skin surface seen from the probe,
/// background-masked: pixels beyond `depth_threshold` (or missing the
/// phantom) are 0; closer surfaces are brighter.
pub fn render_probe_view(
    phantom: &PlacedPhantom,
    probe_pose: &Pose,
    camera: &CameraModel,
    rng_seed: u64,
) -> UltrasoundFrame {
    let w = camera.image_width_px;
    let h = camera.image_height_px;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let dir = probe_pose.orientation * nalgebra::Vector3::z();
    let axis_origin = phantom.origin_vec();
    let mut pixels = vec![0.0f32; w * h];
    for r in 0..h {
        for c in 0..w {
            let noise: f64 = rng.gen_range(-1.0..1.0);
            let ox = (c as f64 + 0.5) / w as f64 * camera.extent - camera.extent / 2.0;
            let oy = (r as f64 + 0.5) / h as f64 * camera.extent - camera.extent / 2.0;
            let origin =
                probe_pose.transform_point(&nalgebra::Vector3::new(ox, oy, 0.0));
            // ray-cylinder intersection in the y-z plane
            let o2 = nalgebra::Vector2::new(origin.y - axis_origin.y, origin.z - axis_origin.z);
            let d2 = nalgebra::Vector2::new(dir.y, dir.z);
            let qa = d2.dot(&d2);
            if qa < 1e-12 {
                continue;
            }
            let qb = 2.0 * o2.dot(&d2);
            let qc = o2.dot(&o2) - phantom.spec.skin_radius.powi(2);
            let disc = qb * qb - 4.0 * qa * qc;
            if disc < 0.0 {
                continue;
            }
            let sqrt_disc = disc.sqrt();
            let t0 = (-qb - sqrt_disc) / (2.0 * qa);
            let t1 = (-qb + sqrt_disc) / (2.0 * qa);
            let t = if t0 > 0.0 {
                t0
            } else if t1 > 0.0 {
                t1
            } else {
                continue;
            };
            let hit = origin + t * dir;
            if hit.x < axis_origin.x || hit.x > axis_origin.x + phantom.spec.skin_length {
                continue;
            }
            if t > camera.depth_threshold {
                continue;
            }
            let v = (1.0 - t / camera.depth_threshold) * (1.0 + camera.noise_level * noise);
            pixels[r * w + c] = (v as f32).clamp(0.0, 1.0);
        }
    }
    UltrasoundFrame {
        pixels,
        width: w,
        height: h,
        timestamp: 0.0,
    }
}
