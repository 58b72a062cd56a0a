use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::numerics::Tensor;

/// Half-width of the box every shape fits in.
pub const SHAPE_RADIUS: i32 = 4;

/// Number of distinct shapes available.
pub const NUM_SHAPES: usize = 6;

/// Whether pixel `(dy, dx)` relative to the centre belongs to shape `class`.
/// Shapes: small square, big square, plus, hollow square, X, horizontal bar.
pub fn shape_contains(class: usize, dy: i32, dx: i32) -> bool {
    let r = SHAPE_RADIUS;
    if dy.abs() > r || dx.abs() > r {
        return false;
    }
    match class {
        0 => dy.abs() <= 2 && dx.abs() <= 2,
        1 => true,
        2 => dy.abs() <= 1 || dx.abs() <= 1,
        3 => dy.abs() == r || dx.abs() == r,
        4 => dy.abs() == dx.abs(),
        5 => dy.abs() <= 1,
        _ => false,
    }
}

/// Integer centres of an object, one per frame, as `(row, col)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trajectory {
    pub centers: Vec<(i32, i32)>,
}

fn reflect(pos: i32, vel: i32, lo: i32, hi: i32) -> (i32, i32) {
    let (mut p, mut v) = (pos + vel, vel);
    if hi <= lo {
        return (lo, 0);
    }
    while p < lo || p > hi {
        if p < lo {
            p = 2 * lo - p;
        } else {
            p = 2 * hi - p;
        }
        v = -v;
    }
    (p, v)
}

impl Trajectory {
    /// Constant velocity from `start`, reflecting off the borders of an
    /// `h × w` grid.
    pub fn piecewise_linear(start: (i32, i32), velocity: (i32, i32), t: usize, h: usize, w: usize) -> Self {
        Self::segments(start, &[(0, velocity)], t, (0, 0), (h as i32 - 1, w as i32 - 1))
    }

    /// Velocity changes at the listed frame indices; positions stay in
    /// `lo ..= hi` by reflection.
    pub fn segments(
        start: (i32, i32),
        changes: &[(usize, (i32, i32))],
        t: usize,
        lo: (i32, i32),
        hi: (i32, i32),
    ) -> Self {
        let mut centers = Vec::with_capacity(t);
        let (mut p, mut v) = (start, (0, 0));
        let mut next = 0;
        for i in 0..t {
            if i > 0 {
                let (y, vy) = reflect(p.0, v.0, lo.0, hi.0);
                let (x, vx) = reflect(p.1, v.1, lo.1, hi.1);
                p = (y, x);
                v = (vy, vx);
            }
            while next < changes.len() && changes[next].0 <= i {
                v = changes[next].1;
                next += 1;
            }
            centers.push(p);
        }
        Self { centers }
    }
}

/// Generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenParams {
    pub frames: usize,
    pub size: usize,
    pub classes: usize,
    /// Per-frame chance that an occlusion starts.
    pub occlusion_prob: f64,
    /// Longest occlusion, in frames (at least 2).
    pub max_occlusion: usize,
    /// Largest per-axis speed in pixels per frame.
    pub max_speed: i32,
    /// Per-frame chance that the velocity changes.
    pub turn_prob: f64,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    /// Intensity of the occluding square.
    pub occluder_level: f64,
    /// Side of the occluding square (odd).
    pub occluder_size: usize,
    /// Earliest frame (0-based) an occlusion may start.
    pub first_occlusion: usize,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            frames: 24,
            size: 32,
            classes: 4,
            occlusion_prob: 0.15,
            max_occlusion: 6,
            max_speed: 1,
            turn_prob: 0.1,
            noise: 0.05,
            occluder_level: 0.5,
            occluder_size: 11,
            first_occlusion: 4,
        }
    }
}

impl GenParams {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 8 {
            return config_err("videos need at least 8 frames");
        }
        if self.size != 32 && self.size != 64 {
            return config_err(format!("frame size must be 32 or 64, got {}", self.size));
        }
        if self.classes == 0 || self.classes > NUM_SHAPES {
            return config_err(format!("classes must be in 1..={NUM_SHAPES}"));
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob) || !(0.0..=1.0).contains(&self.turn_prob) {
            return config_err("probabilities must lie in [0, 1]");
        }
        if self.max_occlusion < 2 {
            return config_err("occlusions last at least 2 frames");
        }
        if self.max_speed < 0 || !(self.noise >= 0.0) {
            return config_err("speed and noise must be non-negative");
        }
        if self.occluder_size % 2 == 0 || (self.occluder_size as i32) < 2 * SHAPE_RADIUS + 1 {
            return config_err("occluder must be odd and cover the whole shape");
        }
        Ok(())
    }

    fn margin(&self) -> i32 {
        self.occluder_size as i32 / 2
    }
}

/// Ground truth of one frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameLabel {
    pub class: usize,
    pub center: (i32, i32),
    pub visible: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticVideo {
    /// `size × size × 1` grayscale frames.
    pub frames: Vec<Tensor>,
    pub labels: Vec<FrameLabel>,
}

impl SyntheticVideo {
    pub fn class(&self) -> usize {
        self.labels[0].class
    }
}

/// Video with a random class.
pub fn generate(seed: u64, params: &GenParams) -> Result<SyntheticVideo> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let class = rng.gen_range(0..params.classes);
    render(&mut rng, class, params)
}

/// Video of a given class.
pub fn generate_class(seed: u64, class: usize, params: &GenParams) -> Result<SyntheticVideo> {
    params.validate()?;
    if class >= params.classes {
        return config_err(format!("class {class} out of range {}", params.classes));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    render(&mut rng, class, params)
}

fn render(rng: &mut ChaCha8Rng, class: usize, p: &GenParams) -> Result<SyntheticVideo> {
    let n = p.size as i32;
    let m = p.margin();
    let (lo, hi) = ((m, m), (n - 1 - m, n - 1 - m));
    let speed = |rng: &mut ChaCha8Rng| rng.gen_range(-p.max_speed..=p.max_speed);
    let start = (rng.gen_range(lo.0..=hi.0), rng.gen_range(lo.1..=hi.1));
    let mut changes = vec![(0, (speed(rng), speed(rng)))];
    for i in 1..p.frames {
        if rng.gen_bool(p.turn_prob) {
            changes.push((i, (speed(rng), speed(rng))));
        }
    }
    let traj = Trajectory::segments(start, &changes, p.frames, lo, hi);

    let mut visible = vec![true; p.frames];
    let mut i = p.first_occlusion;
    while i + 2 <= p.frames {
        if rng.gen_bool(p.occlusion_prob) {
            let len = rng.gen_range(2..=p.max_occlusion);
            for v in visible.iter_mut().skip(i).take(len) {
                *v = false;
            }
            i += len + 1;
        } else {
            i += 1;
        }
    }

    let noise = Normal::new(0.0, p.noise.max(f64::MIN_POSITIVE)).expect("finite noise");
    let half = p.occluder_size as i32 / 2;
    let mut frames = Vec::with_capacity(p.frames);
    let mut labels = Vec::with_capacity(p.frames);
    for (f, &(cy, cx)) in traj.centers.iter().enumerate() {
        let mut img = Tensor::zeros(&[p.size, p.size, 1]);
        for y in 0..n {
            for x in 0..n {
                let (dy, dx) = (y - cy, x - cx);
                let v = if !visible[f] && dy.abs() <= half && dx.abs() <= half {
                    p.occluder_level
                } else if shape_contains(class, dy, dx) {
                    1.0
                } else {
                    0.0
                };
                let eps = if p.noise > 0.0 { noise.sample(rng) } else { 0.0 };
                img.data_mut()[(y * n + x) as usize] = v + eps;
            }
        }
        frames.push(img);
        labels.push(FrameLabel {
            class,
            center: (cy, cx),
            visible: visible[f],
        });
    }
    Ok(SyntheticVideo { frames, labels })
}

/// Class-balanced set of `n` videos: video `i` has class `i mod k` and its
/// own RNG stream derived from `seed`.
pub fn generate_dataset(seed: u64, n: usize, params: &GenParams) -> Result<Vec<SyntheticVideo>> {
    (0..n)
        .map(|i| {
            let s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64);
            generate_class(s, i % params.classes, params)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_motion() {
        let t = Trajectory::piecewise_linear((4, 4), (1, 0), 5, 32, 32);
        assert_eq!(t.centers, vec![(4, 4), (5, 4), (6, 4), (7, 4), (8, 4)]);
    }

    #[test]
    fn reflection_keeps_inside() {
        let t = Trajectory::piecewise_linear((1, 30), (-2, 3), 20, 32, 32);
        assert!(t.centers.iter().all(|&(y, x)| (0..32).contains(&y) && (0..32).contains(&x)));
        assert_eq!(&t.centers[..3], &[(1, 30), (1, 29), (3, 26)]);
    }

    #[test]
    fn velocity_changes() {
        let t = Trajectory::segments((10, 10), &[(0, (1, 0)), (2, (0, 1))], 5, (0, 0), (31, 31));
        assert_eq!(t.centers, vec![(10, 10), (11, 10), (12, 10), (12, 11), (12, 12)]);
    }

    #[test]
    fn shapes_have_distinct_masks() {
        let masks: Vec<Vec<bool>> = (0..NUM_SHAPES)
            .map(|c| {
                (-4..=4)
                    .flat_map(|dy| (-4..=4).map(move |dx| shape_contains(c, dy, dx)))
                    .collect()
            })
            .collect();
        for a in 0..NUM_SHAPES {
            for b in a + 1..NUM_SHAPES {
                assert_ne!(masks[a], masks[b]);
            }
        }
    }

    #[test]
    fn deterministic_and_valid() {
        let p = GenParams::default();
        let a = generate(7, &p).unwrap();
        assert_eq!(a, generate(7, &p).unwrap());
        assert_ne!(a.frames, generate(8, &p).unwrap().frames);
        assert_eq!(a.frames.len(), 24);
        assert!(a.labels[..4].iter().all(|l| l.visible));
    }

    #[test]
    fn no_occlusion_means_always_visible() {
        let p = GenParams {
            occlusion_prob: 0.0,
            ..GenParams::default()
        };
        for s in 0..5 {
            assert!(generate(s, &p).unwrap().labels.iter().all(|l| l.visible));
        }
    }

    #[test]
    fn occlusions_span_two_to_max_frames() {
        let p = GenParams {
            occlusion_prob: 0.5,
            frames: 64,
            ..GenParams::default()
        };
        let mut seen = 0;
        for s in 0..20 {
            let v = generate(s, &p).unwrap();
            let mut run = 0;
            for l in v.labels.iter().chain(std::iter::once(&FrameLabel { visible: true, ..v.labels[0] })) {
                if l.visible {
                    if run > 0 {
                        assert!((2..=p.max_occlusion).contains(&run), "run {run}");
                        seen += 1;
                    }
                    run = 0;
                } else {
                    run += 1;
                }
            }
        }
        assert!(seen > 0);
    }

    #[test]
    fn occluded_frames_hide_the_class() {
        let p = GenParams {
            noise: 0.0,
            occlusion_prob: 1.0,
            max_speed: 0,
            ..GenParams::default()
        };
        let a = generate_class(3, 0, &p).unwrap();
        let b = generate_class(3, 1, &p).unwrap();
        let f = a.labels.iter().position(|l| !l.visible).unwrap();
        assert_eq!(a.labels[f].center, b.labels[f].center);
        assert_eq!(a.frames[f], b.frames[f]);
    }

    #[test]
    fn dataset_is_balanced() {
        let d = generate_dataset(1, 12, &GenParams::default()).unwrap();
        for c in 0..4 {
            assert_eq!(d.iter().filter(|v| v.class() == c).count(), 3);
        }
    }

    #[test]
    fn bad_params() {
        let bad = |f: fn(&mut GenParams)| {
            let mut p = GenParams::default();
            f(&mut p);
            generate(0, &p).is_err()
        };
        assert!(bad(|p| p.frames = 4));
        assert!(bad(|p| p.size = 48));
        assert!(bad(|p| p.classes = 9));
        assert!(bad(|p| p.max_occlusion = 1));
        assert!(bad(|p| p.occluder_size = 7));
    }
}
