//! Globally adaptive Gauss-Legendre quadrature.
//!
//! Each panel is integrated with a 15-point rule on the whole panel and on its
//! two halves; the difference is the panel's error estimate. The panel with the
//! largest estimate is split until the summed estimate meets the tolerance.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

/// Non-negative abscissae and weights of the 15-point Gauss-Legendre rule on [-1, 1].
const GL15: [(f64, f64); 8] = [
    (0.000_000_000_000_000_00e+00, 2.025_782_419_255_608_98e-01),
    (2.011_940_939_974_345_14e-01, 1.984_314_853_271_112_46e-01),
    (3.941_513_470_775_633_85e-01, 1.861_610_000_155_618_78e-01),
    (5.709_721_726_085_388_30e-01, 1.662_692_058_169_937_81e-01),
    (7.244_177_313_601_700_70e-01, 1.395_706_779_261_539_08e-01),
    (8.482_065_834_104_272_06e-01, 1.071_592_204_671_717_73e-01),
    (9.372_733_924_007_059_51e-01, 7.036_604_748_810_806_89e-02),
    (9.879_925_180_204_853_77e-01, 3.075_324_199_611_864_65e-02),
];

pub const DEFAULT_ABS_TOL: f64 = 1e-10;
pub const DEFAULT_REL_TOL: f64 = 1e-8;
const MAX_PANELS: usize = 4000;

#[derive(Debug, Clone, Copy)]
pub struct Tolerance {
    pub abs: f64,
    pub rel: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance {
            abs: DEFAULT_ABS_TOL,
            rel: DEFAULT_REL_TOL,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct QuadResult {
    pub value: f64,
    pub error: f64,
    pub panels: usize,
}

fn gauss15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> f64 {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let mut sum = GL15[0].1 * f(c);
    for &(x, w) in &GL15[1..] {
        sum += w * (f(c - h * x) + f(c + h * x));
    }
    sum * h
}

struct Panel {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

impl PartialEq for Panel {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl Eq for Panel {}
impl PartialOrd for Panel {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Panel {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error.total_cmp(&other.error)
    }
}

fn panel<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> Panel {
    let whole = gauss15(f, a, b);
    let m = 0.5 * (a + b);
    let halves = gauss15(f, a, m) + gauss15(f, m, b);
    Panel {
        a,
        b,
        value: halves,
        error: (halves - whole).abs(),
    }
}

/// Integrates `f` over `[a, b]`, optionally splitting first at `breaks`
/// (points outside the interval are ignored).
pub fn integrate_with<F: Fn(f64) -> f64>(
    f: F,
    a: f64,
    b: f64,
    breaks: &[f64],
    tol: Tolerance,
) -> QuadResult {
    if !(b > a) {
        return QuadResult {
            value: 0.0,
            error: 0.0,
            panels: 0,
        };
    }
    let mut cuts: Vec<f64> = breaks
        .iter()
        .copied()
        .filter(|&x| x > a && x < b && x.is_finite())
        .collect();
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();

    let mut heap = BinaryHeap::new();
    let mut lo = a;
    for &c in cuts.iter().chain(std::iter::once(&b)) {
        heap.push(panel(&f, lo, c));
        lo = c;
    }

    loop {
        let (value, error) = heap
            .iter()
            .fold((0.0, 0.0), |(v, e), p| (v + p.value, e + p.error));
        let target = tol.abs.max(tol.rel * value.abs());
        if error <= target || heap.len() >= MAX_PANELS {
            return QuadResult {
                value,
                error,
                panels: heap.len(),
            };
        }
        let worst = heap.pop().expect("heap is non-empty");
        let m = 0.5 * (worst.a + worst.b);
        if !(m > worst.a && m < worst.b) {
            // Panel can no longer be split in floating point; keep it as is.
            heap.push(Panel { error: 0.0, ..worst });
            continue;
        }
        heap.push(panel(&f, worst.a, m));
        heap.push(panel(&f, m, worst.b));
    }
}

pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64) -> f64 {
    integrate_with(f, a, b, &[], Tolerance::default()).value
}
