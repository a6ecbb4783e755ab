/// Streaming mean and variance.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct WelfordAccumulator {
    pub n: u64,
    pub mean: f64,
    pub m2: f64,
}

impl WelfordAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_slice(xs: &[f64]) -> Self {
        let mut acc = Self::new();
        for &x in xs {
            acc.update(x);
        }
        acc
    }

    pub fn update(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    /// Combines two accumulators as if their streams had been concatenated.
    pub fn merge(&mut self, other: &WelfordAccumulator) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *other;
            return;
        }
        let n = self.n + other.n;
        let delta = other.mean - self.mean;
        let (na, nb) = (self.n as f64, other.n as f64);
        self.mean += delta * nb / n as f64;
        self.m2 += other.m2 + delta * delta * na * nb / n as f64;
        self.n = n;
    }

    /// Sample variance; zero below two observations.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }
}

/// Result of a Welch t-test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WelchT {
    pub t: f64,
    /// Both classes have zero variance but different means.
    pub degenerate: bool,
}

impl WelchT {
    pub fn abs(&self) -> f64 {
        self.t.abs()
    }
}

pub fn welch_t(a: &WelfordAccumulator, b: &WelfordAccumulator) -> WelchT {
    let diff = a.mean - b.mean;
    let se2 = a.variance() / a.n.max(1) as f64 + b.variance() / b.n.max(1) as f64;
    if diff == 0.0 {
        return WelchT {
            t: 0.0,
            degenerate: false,
        };
    }
    if se2 <= 0.0 {
        return WelchT {
            t: f64::INFINITY.copysign(diff),
            degenerate: true,
        };
    }
    WelchT {
        t: diff / se2.sqrt(),
        degenerate: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_pass(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
        (mean, var)
    }

    #[test]
    fn single_update() {
        let acc = WelfordAccumulator::from_slice(&[5.0]);
        assert_eq!((acc.n, acc.mean, acc.m2), (1, 5.0, 0.0));
    }

    #[test]
    fn small_stream_matches_two_pass() {
        let acc = WelfordAccumulator::from_slice(&[1.0, 2.0, 3.0]);
        let (mean, var) = two_pass(&[1.0, 2.0, 3.0]);
        assert_eq!(acc.mean, mean);
        assert!((acc.variance() - var).abs() < 1e-15);
        assert_eq!(mean, 2.0);
        assert!((var - 1.0).abs() < 1e-15);
    }

    #[test]
    fn merge_matches_concatenation() {
        let mut a = WelfordAccumulator::from_slice(&[1.0, 2.0]);
        a.merge(&WelfordAccumulator::from_slice(&[3.0]));
        let whole = WelfordAccumulator::from_slice(&[1.0, 2.0, 3.0]);
        assert_eq!(a.n, whole.n);
        assert!((a.mean - whole.mean).abs() < 1e-12);
        assert!((a.variance() - whole.variance()).abs() < 1e-12);
    }

    #[test]
    fn merge_with_empty_is_identity() {
        let a = WelfordAccumulator::from_slice(&[4.0, 7.0]);
        let mut b = a;
        b.merge(&WelfordAccumulator::new());
        assert_eq!(a, b);
        let mut c = WelfordAccumulator::new();
        c.merge(&a);
        assert_eq!(a, c);
    }

    #[test]
    fn welch_hand_example() {
        let f = WelfordAccumulator::from_slice(&[0.0, 1.0, 0.0, 1.0]);
        let r = WelfordAccumulator::from_slice(&[1.0, 2.0, 1.0, 2.0]);
        // var = 1/3 each, se^2 = 2 * (1/3) / 4 = 1/6, t = -1 / sqrt(1/6)
        let t = welch_t(&f, &r);
        assert!((t.t + 6f64.sqrt()).abs() < 1e-12);
        assert!(!t.degenerate);
    }

    #[test]
    fn welch_edge_cases() {
        let a = WelfordAccumulator::from_slice(&[1.0, 3.0, 2.0]);
        assert_eq!(welch_t(&a, &a).t, 0.0);
        let c0 = WelfordAccumulator::from_slice(&[2.0, 2.0]);
        let c1 = WelfordAccumulator::from_slice(&[2.0, 2.0, 2.0]);
        assert_eq!(welch_t(&c0, &c1), WelchT { t: 0.0, degenerate: false });
        let c2 = WelfordAccumulator::from_slice(&[3.0, 3.0]);
        let d = welch_t(&c0, &c2);
        assert!(d.degenerate && d.t == f64::NEG_INFINITY);
        let z0 = WelfordAccumulator::from_slice(&[-1.0, 1.0]);
        let z1 = WelfordAccumulator::from_slice(&[-5.0, 5.0, 0.0]);
        assert_eq!(welch_t(&z0, &z1).t, 0.0);
    }

    proptest! {
        #[test]
        fn merge_law(xs in proptest::collection::vec(-1e3f64..1e3, 2..200), split in 0usize..200) {
            let k = split % xs.len();
            let mut a = WelfordAccumulator::from_slice(&xs[..k]);
            a.merge(&WelfordAccumulator::from_slice(&xs[k..]));
            let whole = WelfordAccumulator::from_slice(&xs);
            prop_assert_eq!(a.n, whole.n);
            prop_assert!((a.mean - whole.mean).abs() <= 1e-12 * (1.0 + whole.mean.abs()));
            prop_assert!((a.m2 - whole.m2).abs() <= 1e-9 * (1.0 + whole.m2.abs()));
        }

        #[test]
        fn welch_is_antisymmetric(xs in proptest::collection::vec(-10f64..10.0, 2..30),
                                  ys in proptest::collection::vec(-10f64..10.0, 2..30)) {
            let (a, b) = (WelfordAccumulator::from_slice(&xs), WelfordAccumulator::from_slice(&ys));
            prop_assert_eq!(welch_t(&a, &b).t, -welch_t(&b, &a).t);
        }
    }
}
