//! Arc-length parameterized reference paths.
//!
//! A path is a closed loop of piecewise-constant-curvature segments. Queries
//! wrap modulo the total length, so long rollouts never fall off the end.
//! An optional moving-average window smooths the curvature profile to avoid
//! jumps at segment joints.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::scalar::{cast, Scalar};

/// Piecewise-constant-curvature reference path.
///
/// Immutable after construction; cheap to share across threads.
#[derive(Clone, Debug)]
pub struct PathSpec<T> {
    segments: Vec<(T, T)>,
    smoothing_window: Option<T>,
    lane_half_width: T,
    total_length: T,
    /// Cumulative arc length at segment starts, plus the total at the end.
    cum_len: Vec<T>,
    /// Tangent angle at segment starts (integral of raw curvature).
    cum_phi: Vec<T>,
    /// Global position at segment starts for exact pose reconstruction.
    cum_xy: Vec<(T, T)>,
    /// Pose samples on a uniform grid, only built when smoothing is on.
    pose_grid: Option<PoseGrid<T>>,
}

#[derive(Clone, Debug)]
struct PoseGrid<T> {
    step: T,
    /// (x, y, phi) at s = i * step.
    nodes: Vec<(T, T, T)>,
}

impl<T: Scalar> PathSpec<T> {
    pub fn new(
        segments: Vec<(T, T)>,
        smoothing_window: Option<T>,
        lane_half_width: T,
    ) -> Result<Self> {
        if segments.is_empty() {
            return Err(CoreError::invalid("segments", "path needs at least one segment"));
        }
        if lane_half_width <= T::zero() {
            return Err(CoreError::invalid("lane_half_width", "must be positive"));
        }
        for (i, &(len, kappa)) in segments.iter().enumerate() {
            if !(len > T::zero()) {
                return Err(CoreError::invalid(
                    "segments",
                    format!("segment {i} has non-positive length {len}"),
                ));
            }
            if kappa.abs() * lane_half_width >= T::one() {
                return Err(CoreError::invalid(
                    "segments",
                    format!(
                        "segment {i}: |curvature| * lane_half_width = {} must stay below 1",
                        kappa.abs() * lane_half_width
                    ),
                ));
            }
        }
        if let Some(w) = smoothing_window {
            if !(w > T::zero()) {
                return Err(CoreError::invalid("smoothing_window", "must be positive"));
            }
        }

        let mut cum_len = Vec::with_capacity(segments.len() + 1);
        let mut cum_phi = Vec::with_capacity(segments.len() + 1);
        let mut cum_xy = Vec::with_capacity(segments.len() + 1);
        let mut s = T::zero();
        let mut phi = T::zero();
        let mut xy = (T::zero(), T::zero());
        for &(len, kappa) in &segments {
            cum_len.push(s);
            cum_phi.push(phi);
            cum_xy.push(xy);
            xy = advance_arc(xy, phi, kappa, len);
            s = s + len;
            phi = phi + kappa * len;
        }
        cum_len.push(s);
        cum_phi.push(phi);
        cum_xy.push(xy);

        let mut path = PathSpec {
            segments,
            smoothing_window,
            lane_half_width,
            total_length: s,
            cum_len,
            cum_phi,
            cum_xy,
            pose_grid: None,
        };
        if path.smoothing_window.is_some() {
            path.pose_grid = Some(path.build_pose_grid());
        }
        Ok(path)
    }

    pub fn total_length(&self) -> T {
        self.total_length
    }

    pub fn lane_half_width(&self) -> T {
        self.lane_half_width
    }

    pub fn segments(&self) -> &[(T, T)] {
        &self.segments
    }

    pub fn smoothing_window(&self) -> Option<T> {
        self.smoothing_window
    }

    fn wrap(&self, s: T) -> T {
        let l = self.total_length;
        let w = s - l * (s / l).floor();
        // Guard against w == l from rounding.
        if w >= l {
            T::zero()
        } else {
            w
        }
    }

    /// Index of the segment containing wrapped arc length `s`.
    fn segment_index(&self, s: T) -> usize {
        // cum_len is sorted; binary search by hand since T is not Ord.
        let mut lo = 0usize;
        let mut hi = self.segments.len();
        while lo + 1 < hi {
            let mid = (lo + hi) / 2;
            if self.cum_len[mid] <= s {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }

    /// Raw (unsmoothed) curvature at arc length `s`.
    pub fn raw_curvature_at(&self, s: T) -> T {
        let s = self.wrap(s);
        self.segments[self.segment_index(s)].1
    }

    /// Curvature at arc length `s`, moving-average smoothed when the path
    /// carries a smoothing window. Wraps modulo the total length.
    pub fn curvature_at(&self, s: T) -> T {
        match self.smoothing_window {
            None => self.raw_curvature_at(s),
            Some(w) => {
                let half = w * cast(0.5);
                (self.phi_ext(s + half) - self.phi_ext(s - half)) / w
            }
        }
    }

    /// Tangent angle of the raw path, extended periodically:
    /// phi(s + k L) = phi(s) + k phi(L).
    fn phi_ext(&self, s: T) -> T {
        let l = self.total_length;
        let k = (s / l).floor();
        let r = s - k * l;
        let r = if r >= l { T::zero() } else { r };
        let idx = self.segment_index(r);
        let phi_r = self.cum_phi[idx] + self.segments[idx].1 * (r - self.cum_len[idx]);
        phi_r + k * self.cum_phi[self.segments.len()]
    }

    /// Tangent angle at arc length `s` of the path actually traced by
    /// `global_pose` (smoothed profile when smoothing is on).
    pub fn tangent_at(&self, s: T) -> T {
        match &self.pose_grid {
            None => self.phi_ext(self.wrap(s)),
            Some(grid) => grid_lookup(grid, self.wrap(s)).2,
        }
    }

    /// Global-frame pose of a point at arc length `s`, lateral offset `d`
    /// (positive to the left of the center line), local heading error `mu`.
    /// Returns (x, y, heading).
    pub fn global_pose(&self, s: T, d: T, mu: T) -> (T, T, T) {
        let sw = self.wrap(s);
        let (cx, cy, phi) = match &self.pose_grid {
            None => {
                let idx = self.segment_index(sw);
                let (len_used, kappa) = (sw - self.cum_len[idx], self.segments[idx].1);
                let (x, y) = advance_arc(self.cum_xy[idx], self.cum_phi[idx], kappa, len_used);
                (x, y, self.cum_phi[idx] + kappa * len_used)
            }
            Some(grid) => grid_lookup(grid, sw),
        };
        let x = cx - d * phi.sin();
        let y = cy + d * phi.cos();
        (x, y, phi + mu)
    }

    /// Integrate the smoothed heading ODE on a fixed grid. Plot fidelity only;
    /// control queries never touch this.
    fn build_pose_grid(&self) -> PoseGrid<T> {
        let step: T = cast(0.05);
        let n = (self.total_length / step).ceil().to_usize().unwrap_or(0) + 1;
        let mut nodes = Vec::with_capacity(n);
        let mut x = T::zero();
        let mut y = T::zero();
        let mut phi = T::zero();
        let mut s = T::zero();
        nodes.push((x, y, phi));
        for _ in 1..n {
            // RK4 on (x', y', phi') = (cos phi, sin phi, kappa(s)).
            let h = step;
            let half = h * cast(0.5);
            let k1 = (phi.cos(), phi.sin(), self.curvature_at(s));
            let p2 = phi + half * k1.2;
            let k2 = (p2.cos(), p2.sin(), self.curvature_at(s + half));
            let p3 = phi + half * k2.2;
            let k3 = (p3.cos(), p3.sin(), self.curvature_at(s + half));
            let p4 = phi + h * k3.2;
            let k4 = (p4.cos(), p4.sin(), self.curvature_at(s + h));
            let sixth = h / cast(6.0);
            let two = cast::<T>(2.0);
            x = x + sixth * (k1.0 + two * k2.0 + two * k3.0 + k4.0);
            y = y + sixth * (k1.1 + two * k2.1 + two * k3.1 + k4.1);
            phi = phi + sixth * (k1.2 + two * k2.2 + two * k3.2 + k4.2);
            s = s + h;
            nodes.push((x, y, phi));
        }
        PoseGrid { step, nodes }
    }

    /// Serialize the segment table as CSV with a one-line header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("length,curvature\n");
        for &(len, kappa) in &self.segments {
            out.push_str(&format!("{len},{kappa}\n"));
        }
        out
    }

    /// Parse a segment-table CSV (as produced by [`PathSpec::to_csv`]).
    /// Lines starting with `#` are ignored. Lane half width and smoothing
    /// are not part of the serialized form and must be supplied.
    pub fn from_csv(text: &str, smoothing_window: Option<T>, lane_half_width: T) -> Result<Self> {
        let mut segments = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with("length") {
                continue;
            }
            let mut parts = line.split(',');
            let parse = |p: Option<&str>| -> Result<T> {
                let raw = p.ok_or_else(|| {
                    CoreError::Parse(format!("line {}: expected length,curvature", lineno + 1))
                })?;
                raw.trim()
                    .parse::<f64>()
                    .map(cast)
                    .map_err(|e| CoreError::Parse(format!("line {}: {e}", lineno + 1)))
            };
            let len = parse(parts.next())?;
            let kappa = parse(parts.next())?;
            segments.push((len, kappa));
        }
        PathSpec::new(segments, smoothing_window, lane_half_width)
    }
}

/// Advance (x, y) along a constant-curvature arc of the given length starting
/// with tangent angle `phi`.
fn advance_arc<T: Scalar>(xy: (T, T), phi: T, kappa: T, len: T) -> (T, T) {
    let tiny: T = cast(1e-12);
    if kappa.abs() < tiny {
        (xy.0 + len * phi.cos(), xy.1 + len * phi.sin())
    } else {
        let phi1 = phi + kappa * len;
        (
            xy.0 + (phi1.sin() - phi.sin()) / kappa,
            xy.1 - (phi1.cos() - phi.cos()) / kappa,
        )
    }
}

fn grid_lookup<T: Scalar>(grid: &PoseGrid<T>, s: T) -> (T, T, T) {
    let idx_f = s / grid.step;
    let i = idx_f.floor().to_usize().unwrap_or(0).min(grid.nodes.len() - 1);
    let j = (i + 1).min(grid.nodes.len() - 1);
    let frac = idx_f - cast(i as f64);
    let (x0, y0, p0) = grid.nodes[i];
    let (x1, y1, p1) = grid.nodes[j];
    (
        x0 + frac * (x1 - x0),
        y0 + frac * (y1 - y0),
        p0 + frac * (p1 - p0),
    )
}

/// Track construction recipes.
#[derive(Clone, Debug)]
pub enum TrackKind<T> {
    Straight {
        length: T,
    },
    Circle {
        radius: T,
        length: T,
    },
    /// Alternating left/right arcs with straights in between.
    SCurve {
        radius: T,
        arc_length: T,
        straight_length: T,
        pairs: usize,
    },
    Random(RandomTrackParams<T>),
}

/// Ranges for seeded random tracks.
#[derive(Clone, Debug)]
pub struct RandomTrackParams<T> {
    pub n_segments: usize,
    pub length_range: (T, T),
    /// Maximum absolute curvature drawn for curved segments.
    pub kappa_max: T,
    /// Probability that a segment is straight.
    pub straight_prob: T,
}

/// Build a track deterministically from a kind, a seed, lane half width, and
/// an optional smoothing window.
pub fn make_track<T: Scalar>(
    kind: &TrackKind<T>,
    seed: u64,
    lane_half_width: T,
    smoothing_window: Option<T>,
) -> Result<PathSpec<T>> {
    match kind {
        TrackKind::Straight { length } => {
            PathSpec::new(vec![(*length, T::zero())], smoothing_window, lane_half_width)
        }
        TrackKind::Circle { radius, length } => {
            if *radius <= lane_half_width {
                return Err(CoreError::invalid(
                    "radius",
                    format!("circle radius {radius} must exceed lane half width {lane_half_width}"),
                ));
            }
            PathSpec::new(
                vec![(*length, T::one() / *radius)],
                smoothing_window,
                lane_half_width,
            )
        }
        TrackKind::SCurve {
            radius,
            arc_length,
            straight_length,
            pairs,
        } => {
            if *radius <= lane_half_width {
                return Err(CoreError::invalid(
                    "radius",
                    format!("arc radius {radius} must exceed lane half width {lane_half_width}"),
                ));
            }
            if *pairs == 0 {
                return Err(CoreError::invalid("pairs", "must be at least 1"));
            }
            let kappa = T::one() / *radius;
            let mut segments = Vec::new();
            for i in 0..*pairs {
                let sign = if i % 2 == 0 { T::one() } else { -T::one() };
                segments.push((*straight_length, T::zero()));
                segments.push((*arc_length, sign * kappa));
            }
            segments.push((*straight_length, T::zero()));
            PathSpec::new(segments, smoothing_window, lane_half_width)
        }
        TrackKind::Random(params) => {
            if params.n_segments == 0 {
                return Err(CoreError::invalid("n_segments", "must be at least 1"));
            }
            if params.kappa_max * lane_half_width >= T::one() {
                return Err(CoreError::invalid(
                    "kappa_max",
                    format!(
                        "kappa_max * lane_half_width = {} must stay below 1",
                        params.kappa_max * lane_half_width
                    ),
                ));
            }
            if !(params.length_range.0 > T::zero() && params.length_range.1 >= params.length_range.0)
            {
                return Err(CoreError::invalid("length_range", "need 0 < min <= max"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut segments = Vec::with_capacity(params.n_segments);
            for _ in 0..params.n_segments {
                let len_f: f64 = rng.gen_range(
                    params.length_range.0.to_f64().unwrap()..=params.length_range.1.to_f64().unwrap(),
                );
                let straight: f64 = rng.gen();
                let kappa_f: f64 = rng.gen_range(-1.0..=1.0);
                let kappa = if straight < params.straight_prob.to_f64().unwrap() {
                    T::zero()
                } else {
                    cast::<T>(kappa_f) * params.kappa_max
                };
                segments.push((cast(len_f), kappa));
            }
            PathSpec::new(segments, smoothing_window, lane_half_width)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn straight(length: f64) -> PathSpec<f64> {
        PathSpec::new(vec![(length, 0.0)], None, 1.5).unwrap()
    }

    #[test]
    fn curvature_single_straight_segment() {
        let p = straight(100.0);
        assert_eq!(p.curvature_at(37.0), 0.0);
    }

    #[test]
    fn curvature_piecewise_lookup() {
        let p = PathSpec::new(vec![(50.0, 0.0), (31.4, 0.1)], None, 1.5).unwrap();
        assert_eq!(p.curvature_at(60.0), 0.1);
        assert_eq!(p.curvature_at(10.0), 0.0);
        // wraps modulo total length
        assert_eq!(p.curvature_at(81.4 + 10.0), 0.0);
    }

    #[test]
    fn curvature_smoothed_at_joint() {
        // Moving average over a 10 m window centered at the joint: the exact
        // window integral of the step profile is 0.1 * 5 / 10 = 0.05.
        let p = PathSpec::new(vec![(50.0, 0.0), (31.4, 0.1)], Some(10.0), 1.5).unwrap();
        let k = p.curvature_at(50.0);
        assert!(k > 0.0 && k < 0.1, "smoothed joint curvature {k}");
        assert_abs_diff_eq!(k, 0.05, epsilon = 1e-12);
    }

    #[test]
    fn global_pose_straight() {
        let p = straight(100.0);
        let (x, y, psi) = p.global_pose(10.0, 0.0, 0.0);
        assert_abs_diff_eq!(x, 10.0, epsilon = 1e-12);
        assert_abs_diff_eq!(y, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(psi, 0.0, epsilon = 1e-12);

        let (x, y, psi) = p.global_pose(0.0, 1.0, 0.0);
        assert_abs_diff_eq!(x, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(y, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(psi, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn global_pose_circle_closed_form() {
        // kappa = 0.1 -> radius 10. Quarter circle ends at (10, 10) heading
        // pi/2; the half circle at arc length pi * r ends at (0, 20) heading pi.
        let p = PathSpec::new(vec![(40.0, 0.1)], None, 1.5).unwrap();

        let quarter = std::f64::consts::PI / 0.2;
        let (x, y, psi) = p.global_pose(quarter, 0.0, 0.0);
        assert_abs_diff_eq!(x, 10.0, epsilon = 1e-6);
        assert_abs_diff_eq!(y, 10.0, epsilon = 1e-6);
        assert_abs_diff_eq!(psi, std::f64::consts::FRAC_PI_2, epsilon = 1e-6);

        let half = std::f64::consts::PI / 0.1;
        let (x, y, psi) = p.global_pose(half, 0.0, 0.0);
        assert_abs_diff_eq!(x, 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(y, 20.0, epsilon = 1e-6);
        assert_abs_diff_eq!(psi, std::f64::consts::PI, epsilon = 1e-6);
    }

    #[test]
    fn traced_curvature_matches_lookup() {
        // Differentiate the traced center line numerically and compare the
        // turning rate with curvature_at, on a smooth (constant kappa) path.
        for kappa in [0.0, 0.05, -0.08] {
            let p = PathSpec::new(vec![(200.0, kappa)], None, 1.5).unwrap();
            let h = 0.01;
            for s in [5.0, 50.0, 120.0] {
                let (_, _, psi0) = p.global_pose(s - h, 0.0, 0.0);
                let (_, _, psi1) = p.global_pose(s + h, 0.0, 0.0);
                let k_num = (psi1 - psi0) / (2.0 * h);
                assert_abs_diff_eq!(k_num, p.curvature_at(s), epsilon = 1e-3);
            }
        }
    }

    #[test]
    fn make_track_straight_and_circle() {
        let t = make_track(&TrackKind::Straight { length: 300.0 }, 0, 1.5, None).unwrap();
        assert_eq!(t.segments(), &[(300.0, 0.0)]);

        let c = make_track(
            &TrackKind::Circle {
                radius: 50.0,
                length: 314.0,
            },
            0,
            1.5,
            None,
        )
        .unwrap();
        assert_eq!(c.segments(), &[(314.0, 0.02)]);
    }

    #[test]
    fn make_track_random_deterministic() {
        let params = RandomTrackParams {
            n_segments: 12,
            length_range: (20.0, 60.0),
            kappa_max: 0.08,
            straight_prob: 0.3,
        };
        let a = make_track(&TrackKind::Random(params.clone()), 7, 1.5, None).unwrap();
        let b = make_track(&TrackKind::Random(params), 7, 1.5, None).unwrap();
        assert_eq!(a.segments(), b.segments());
    }

    #[test]
    fn make_track_rejects_bad_params() {
        let err = make_track(
            &TrackKind::Circle {
                radius: 1.0,
                length: 10.0,
            },
            0,
            1.5,
            None,
        )
        .unwrap_err();
        assert!(err.to_string().contains("radius"));

        let err = make_track(
            &TrackKind::Random(RandomTrackParams {
                n_segments: 3,
                length_range: (10.0, 20.0),
                kappa_max: 0.9,
                straight_prob: 0.0,
            }),
            0,
            1.5,
            None,
        )
        .unwrap_err();
        assert!(err.to_string().contains("kappa_max"));
    }

    #[test]
    fn csv_roundtrip() {
        let p = PathSpec::new(vec![(50.0, 0.0), (31.4, 0.1), (20.0, -0.05)], None, 1.5).unwrap();
        let csv = p.to_csv();
        let q = PathSpec::<f64>::from_csv(&csv, None, 1.5).unwrap();
        assert_eq!(p.segments(), q.segments());
        // comment lines are skipped
        let with_comment = format!("# tool v0 config deadbeef\n{csv}");
        let r = PathSpec::<f64>::from_csv(&with_comment, None, 1.5).unwrap();
        assert_eq!(p.segments(), r.segments());
    }

    #[test]
    fn generic_f32_pose() {
        let p: PathSpec<f32> = PathSpec::new(vec![(100.0f32, 0.0)], None, 1.5).unwrap();
        let (x, _, _) = p.global_pose(10.0, 0.0, 0.0);
        assert!((x - 10.0).abs() < 1e-4);
    }

    proptest! {
        /// Smoothed curvature stays within the min/max of the raw profile.
        #[test]
        fn smoothing_bounded_by_raw_extremes(
            k1 in -0.1f64..0.1,
            k2 in -0.1f64..0.1,
            k3 in -0.1f64..0.1,
            s in 0.0f64..180.0,
        ) {
            let raw = [k1, k2, k3];
            let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let p = PathSpec::new(
                vec![(60.0, k1), (60.0, k2), (60.0, k3)],
                Some(8.0),
                1.5,
            ).unwrap();
            let k = p.curvature_at(s);
            prop_assert!(k >= lo - 1e-12 && k <= hi + 1e-12);
        }

        /// Random tracks always respect the curvature-width invariant.
        #[test]
        fn random_track_invariant(seed in 0u64..500) {
            let params = RandomTrackParams {
                n_segments: 8,
                length_range: (15.0, 40.0),
                kappa_max: 0.1,
                straight_prob: 0.25,
            };
            let t: PathSpec<f64> = make_track(&TrackKind::Random(params), seed, 1.5, None).unwrap();
            for &(_, k) in t.segments() {
                prop_assert!(k.abs() * 1.5 < 1.0);
            }
        }
    }
}
