//! Adam over flat f32 parameter blocks.

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    /// Steps taken per slot; slots start counting when first updated.
    t: Vec<u32>,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: vec![0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One update of `params` given `grads`; `lr(i)` is the rate for slot `i`.
    pub fn step(&mut self, params: &mut [f32], grads: &[f64], lr: impl Fn(usize) -> f64) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed without resize");
        for (i, p) in params.iter_mut().enumerate() {
            self.update(i, p, grads[i], lr(i));
        }
    }

    /// Updates slot `i`; a zero rate leaves the value and its moments as
    /// they are.
    #[inline]
    pub fn update(&mut self, i: usize, param: &mut f32, g: f64, rate: f64) {
        if rate == 0.0 {
            return;
        }
        self.t[i] += 1;
        let t = self.t[i] as i32;
        self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
        self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
        let mh = self.m[i] / (1.0 - self.beta1.powi(t));
        let vh = self.v[i] / (1.0 - self.beta2.powi(t));
        *param = (*param as f64 - rate * mh / (vh.sqrt() + self.eps)) as f32;
    }

    /// Keeps the state of the blocks of `width` slots flagged in `keep`.
    pub fn retain_blocks(&mut self, width: usize, keep: &[bool]) {
        let filter = |src: &mut Vec<f64>| {
            let mut out = Vec::with_capacity(src.len());
            for (b, k) in keep.iter().enumerate() {
                if *k {
                    out.extend_from_slice(&src[b * width..(b + 1) * width]);
                }
            }
            *src = out;
        };
        filter(&mut self.m);
        filter(&mut self.v);
        let mut t = Vec::with_capacity(self.t.len());
        for (b, k) in keep.iter().enumerate() {
            if *k {
                t.extend_from_slice(&self.t[b * width..(b + 1) * width]);
            }
        }
        self.t = t;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let mut x = [3.0f32, -2.0];
        let mut opt = Adam::new(2);
        for _ in 0..2000 {
            let g = [2.0 * x[0] as f64, 2.0 * (x[1] as f64 - 1.0)];
            opt.step(&mut x, &g, |_| 0.01);
        }
        assert!(x[0].abs() < 1e-2 && (x[1] - 1.0).abs() < 1e-2, "{x:?}");
    }

    #[test]
    fn first_step_moves_by_the_rate() {
        let mut x = [0.0f32];
        let mut opt = Adam::new(1);
        opt.step(&mut x, &[123.0], |_| 0.1);
        assert!((x[0] + 0.1).abs() < 1e-6);
    }

    #[test]
    fn zero_rate_freezes_exactly() {
        let mut x = [0.25f32, 0.5];
        let mut opt = Adam::new(2);
        opt.step(&mut x, &[1.0, 1.0], |i| if i == 0 { 0.0 } else { 0.1 });
        assert_eq!(x[0], 0.25);
        assert_ne!(x[1], 0.5);
    }

    #[test]
    fn retain_drops_blocks() {
        let mut opt = Adam::new(6);
        let mut x = [0.0f32; 6];
        opt.step(&mut x, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], |_| 0.1);
        opt.retain_blocks(2, &[true, false, true]);
        assert_eq!(opt.len(), 4);
        assert!((opt.m[2] - 0.5).abs() < 1e-12);
    }
}
