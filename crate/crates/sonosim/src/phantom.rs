//! Parametric neck/artery phantom with a compliant skin-contact model.
//!
//! The skin is a rigid cylinder with a penalty-compliance layer (spring +
//! loading-only damper); the artery is a tube below the surface that wanders
//! laterally and splits in two past the bifurcation arc-length. The contact
//! model supplies the external wrench acting on the probe.

use nalgebra::{UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arm::{Pose, Wrench, WrenchFrame};
use crate::{Error, Result};

/// Geometry and compliance of one phantom instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    /// Skin cylinder radius, m.
    pub skin_radius: f64,
    /// Cylinder length along the neck axis, m.
    pub skin_length: f64,
    /// Artery tube radius, m.
    pub artery_radius: f64,
    /// Artery centerline depth below the skin surface along the inward
    /// normal, m. Must exceed `artery_radius`.
    pub artery_depth: f64,
    /// Lateral wander of the artery: amplitude (m), wavelength (m), phase
    /// (rad) of a low-order sinusoid in arc-length.
    pub wander_amplitude: f64,
    pub wander_wavelength: f64,
    pub wander_phase: f64,
    /// Arc-length where the single vessel splits in two, m.
    pub bifurcation_s: f64,
    /// Lateral growth rate of the branch separation, m per m of arc-length.
    pub branch_separation_rate: f64,
    /// Penalty-layer stiffness, N/m.
    pub skin_stiffness: f64,
    /// Loading-only damping, N s/m.
    pub skin_damping: f64,
    /// Viscous drag against tangential slip, N s/m.
    pub tangential_viscosity: f64,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.artery_depth > self.artery_radius) {
            return Err(Error::Config(
                "artery_depth must exceed artery_radius".into(),
            ));
        }
        if !(self.bifurcation_s > 0.0 && self.bifurcation_s < self.skin_length) {
            return Err(Error::Config(
                "bifurcation_s must lie strictly inside (0, skin_length)".into(),
            ));
        }
        if !(self.skin_stiffness > 0.0) {
            return Err(Error::Config("skin_stiffness must be positive".into()));
        }
        if self.skin_damping < 0.0 || self.tangential_viscosity < 0.0 {
            return Err(Error::Config("damping terms must be non-negative".into()));
        }
        if self.skin_radius <= 0.0 || self.skin_length <= 0.0 || self.artery_radius <= 0.0 {
            return Err(Error::Config("geometry must be positive".into()));
        }
        Ok(())
    }

    /// Lateral wander of the artery centerline at arc-length `s`.
    pub fn lateral_offset(&self, s: f64) -> f64 {
        self.wander_amplitude
            * (2.0 * std::f64::consts::PI * s / self.wander_wavelength + self.wander_phase).sin()
    }

    /// Default bench phantom used by unit tests and as the range midpoint.
    pub fn default_bench() -> PhantomSpec {
        PhantomSpec {
            skin_radius: 0.06,
            skin_length: 0.20,
            artery_radius: 0.004,
            artery_depth: 0.015,
            wander_amplitude: 0.005,
            wander_wavelength: 0.22,
            wander_phase: 0.6,
            bifurcation_s: 0.13,
            branch_separation_rate: 0.8,
            skin_stiffness: 500.0,
            skin_damping: 20.0,
            tangential_viscosity: 10.0,
        }
    }
}

/// Sampling ranges for [`sample_phantom`]; each pair is `[min, max]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomRanges {
    pub skin_radius: [f64; 2],
    pub artery_radius: [f64; 2],
    pub artery_depth: [f64; 2],
    pub wander_amplitude: [f64; 2],
    pub wander_wavelength: [f64; 2],
    pub wander_phase: [f64; 2],
    pub bifurcation_s: [f64; 2],
    pub branch_separation_rate: [f64; 2],
    pub skin_length: f64,
    pub skin_stiffness: f64,
    pub skin_damping: f64,
    pub tangential_viscosity: f64,
}

impl Default for PhantomRanges {
    fn default() -> Self {
        PhantomRanges {
            skin_radius: [0.057, 0.063],
            artery_radius: [0.0035, 0.0045],
            artery_depth: [0.013, 0.017],
            wander_amplitude: [0.003, 0.008],
            wander_wavelength: [0.18, 0.30],
            wander_phase: [0.0, 6.28],
            bifurcation_s: [0.11, 0.15],
            branch_separation_rate: [0.6, 1.0],
            skin_length: 0.20,
            skin_stiffness: 500.0,
            skin_damping: 20.0,
            tangential_viscosity: 10.0,
        }
    }
}

impl PhantomRanges {
    fn validate(&self) -> Result<()> {
        let pairs = [
            self.skin_radius,
            self.artery_radius,
            self.artery_depth,
            self.wander_amplitude,
            self.wander_wavelength,
            self.wander_phase,
            self.bifurcation_s,
            self.branch_separation_rate,
        ];
        if pairs.iter().any(|[lo, hi]| lo > hi) {
            return Err(Error::Config("phantom range has min > max".into()));
        }
        if self.artery_depth[0] <= self.artery_radius[1] {
            return Err(Error::Config(
                "artery depth range must exceed the artery radius range".into(),
            ));
        }
        if self.bifurcation_s[1] >= self.skin_length || self.bifurcation_s[0] <= 0.0 {
            return Err(Error::Config(
                "bifurcation_s range must lie inside (0, skin_length)".into(),
            ));
        }
        Ok(())
    }
}

/// Deterministic phantom sampling from configured ranges.
pub fn sample_phantom(rng_seed: u64, ranges: &PhantomRanges) -> Result<PhantomSpec> {
    ranges.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut draw = |r: [f64; 2]| -> f64 { rng.gen_range(r[0]..=r[1]) };
    let spec = PhantomSpec {
        skin_radius: draw(ranges.skin_radius),
        skin_length: ranges.skin_length,
        artery_radius: draw(ranges.artery_radius),
        artery_depth: draw(ranges.artery_depth),
        wander_amplitude: draw(ranges.wander_amplitude),
        wander_wavelength: draw(ranges.wander_wavelength),
        wander_phase: draw(ranges.wander_phase),
        bifurcation_s: draw(ranges.bifurcation_s),
        branch_separation_rate: draw(ranges.branch_separation_rate),
        skin_stiffness: ranges.skin_stiffness,
        skin_damping: ranges.skin_damping,
        tangential_viscosity: ranges.tangential_viscosity,
    };
    spec.validate()?;
    Ok(spec)
}

/// A phantom placed in the robot base frame: the neck axis runs along +x
/// starting at `origin`, which sits on the cylinder axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacedPhantom {
    pub spec: PhantomSpec,
    pub origin: [f64; 3],
}

/// Snapshot of the probe-skin interaction at one instant.
#[derive(Debug, Clone)]
pub struct ContactState {
    pub in_contact: bool,
    /// Radial penetration into the compliance layer, m (>= 0).
    pub penetration: f64,
    /// Outward surface normal at the contact, base frame.
    pub contact_normal: Vector3<f64>,
    /// Contact point (the probe tip), base frame, m.
    pub contact_point: Vector3<f64>,
    /// Reaction wrench applied by the skin to the probe, probe frame.
    pub wrench_on_probe: Wrench,
}

impl ContactState {
    pub fn free(tip: Vector3<f64>) -> ContactState {
        ContactState {
            in_contact: false,
            penetration: 0.0,
            contact_normal: Vector3::z(),
            contact_point: tip,
            wrench_on_probe: Wrench::zero(WrenchFrame::Probe),
        }
    }

    /// The wrench the probe applies to the skin, probe frame — what the
    /// wrist force sensor reports.
    pub fn measured_wrench(&self) -> Wrench {
        Wrench {
            force: -self.wrench_on_probe.force,
            torque: -self.wrench_on_probe.torque,
            frame: WrenchFrame::Probe,
        }
    }
}

impl PlacedPhantom {
    pub fn origin_vec(&self) -> Vector3<f64> {
        Vector3::new(self.origin[0], self.origin[1], self.origin[2])
    }

    /// Height of the skin crest (top of the cylinder), base frame z.
    pub fn crest_z(&self) -> f64 {
        self.origin[2] + self.spec.skin_radius
    }

    /// Point on the skin surface and its outward normal. `theta = 0` is the
    /// lower rim, `theta = pi` the crest.
    pub fn skin_surface(&self, s: f64, theta: f64) -> Result<(Vector3<f64>, Vector3<f64>)> {
        if !(0.0..=self.spec.skin_length).contains(&s) {
            return Err(Error::Domain(format!(
                "arc-length {s} outside [0, {}]",
                self.spec.skin_length
            )));
        }
        let radial = Vector3::new(0.0, theta.sin(), -theta.cos());
        let point = self.origin_vec() + Vector3::new(s, 0.0, 0.0) + self.spec.skin_radius * radial;
        Ok((point, radial))
    }

    /// Artery centerline point(s) at arc-length `s`, base frame, together
    /// with each vessel's radius. One vessel below the bifurcation, two
    /// above with lateral separation `2 * rate * (s - bifurcation_s)`.
    pub fn artery_centers(&self, s: f64) -> Vec<(Vector3<f64>, f64)> {
        let spec = &self.spec;
        let z = self.origin[2] + spec.skin_radius - spec.artery_depth;
        let y0 = self.origin[1] + spec.lateral_offset(s);
        let x = self.origin[0] + s;
        if s <= spec.bifurcation_s {
            vec![(Vector3::new(x, y0, z), spec.artery_radius)]
        } else {
            let half = spec.branch_separation_rate * (s - spec.bifurcation_s);
            vec![
                (Vector3::new(x, y0 - half, z), spec.artery_radius * 0.85),
                (Vector3::new(x, y0 + half, z), spec.artery_radius * 0.70),
            ]
        }
    }

    /// Cross-sections of the artery cut by the probe's imaging plane.
    ///
    /// Returns image-plane centers `(lateral, depth)` in meters relative to
    /// the probe tip plus the vessel radius, sorted by lateral coordinate
    /// (the first entry is the landmark vessel). The imaging plane passes
    /// through the probe tip with normal along the probe x-axis; the image
    /// lateral axis is the probe's -y, depth is the probe's +z.
    pub fn artery_cross_section(
        &self,
        probe_pose: &Pose,
        footprint_width: f64,
        imaging_depth: f64,
    ) -> Vec<(Vector2<f64>, f64)> {
        let normal = probe_pose.orientation * Vector3::x();
        let f = |s: f64| -> f64 {
            let c = self.origin_vec()
                + Vector3::new(s, self.spec.lateral_offset(s), 0.0)
                + Vector3::new(0.0, 0.0, self.spec.skin_radius - self.spec.artery_depth);
            normal.dot(&(c - probe_pose.position))
        };
        // first sign change of f over the cylinder span
        let n_scan = 64;
        let l = self.spec.skin_length;
        let mut s_cross = None;
        let mut prev = f(0.0);
        for i in 1..=n_scan {
            let s = l * i as f64 / n_scan as f64;
            let cur = f(s);
            if prev == 0.0 {
                s_cross = Some(l * (i - 1) as f64 / n_scan as f64);
                break;
            }
            if prev.signum() != cur.signum() {
                let mut a = l * (i - 1) as f64 / n_scan as f64;
                let mut b = s;
                for _ in 0..60 {
                    let m = 0.5 * (a + b);
                    if f(a).signum() == f(m).signum() {
                        a = m;
                    } else {
                        b = m;
                    }
                }
                s_cross = Some(0.5 * (a + b));
                break;
            }
            prev = cur;
        }
        let Some(s) = s_cross else {
            return Vec::new();
        };
        let mut out: Vec<(Vector2<f64>, f64)> = self
            .artery_centers(s)
            .into_iter()
            .filter_map(|(c, r)| {
                let p = probe_pose.inverse_transform_vector(&(c - probe_pose.position));
                let lat = -p.y;
                let dep = p.z;
                let in_lat = lat.abs() <= footprint_width / 2.0 + r;
                let in_dep = dep + r > 0.0 && dep - r < imaging_depth;
                (in_lat && in_dep).then_some((Vector2::new(lat, dep), r))
            })
            .collect();
        out.sort_by(|a, b| a.0.x.partial_cmp(&b.0.x).unwrap());
        out
    }

    /// Penalty contact between the probe tip and the skin cylinder.
    ///
    /// `probe_twist` is the (linear; angular) velocity of the probe tip in
    /// the base frame. Normal force is `k * pen + c * max(0, pen_rate)`;
    /// tangential force is viscous drag. Zero wrench when not penetrating.
    pub fn contact_wrench(&self, probe_pose: &Pose, probe_twist: &[f64; 6]) -> ContactState {
        let tip = probe_pose.position;
        let rel = tip - self.origin_vec();
        if rel.x < 0.0 || rel.x > self.spec.skin_length {
            return ContactState::free(tip);
        }
        let radial = Vector3::new(0.0, rel.y, rel.z);
        let dist = radial.norm();
        if dist >= self.spec.skin_radius || dist < 1e-12 {
            return ContactState::free(tip);
        }
        let normal = radial / dist;
        let penetration = self.spec.skin_radius - dist;
        let v = Vector3::new(probe_twist[0], probe_twist[1], probe_twist[2]);
        let pen_rate = -v.dot(&normal);
        let f_normal =
            self.spec.skin_stiffness * penetration + self.spec.skin_damping * pen_rate.max(0.0);
        let v_tan = v - v.dot(&normal) * normal;
        let f_tan = -self.spec.tangential_viscosity * v_tan;
        let force_base = f_normal * normal + f_tan;
        let rot_inv = probe_pose.orientation.inverse();
        ContactState {
            in_contact: true,
            penetration,
            contact_normal: normal,
            contact_point: tip,
            wrench_on_probe: Wrench {
                force: rot_inv * force_base,
                torque: Vector3::zeros(),
                frame: WrenchFrame::Probe,
            },
        }
    }
}

/// The canonical scanning orientation: probe z pressing straight down on
/// the crest, probe x anti-parallel to the neck axis so the image lateral
/// axis (-probe y) lines up with -base y.
pub fn scan_orientation() -> UnitQuaternion<f64> {
    UnitQuaternion::from_axis_angle(&Vector3::y_axis(), std::f64::consts::PI)
}
