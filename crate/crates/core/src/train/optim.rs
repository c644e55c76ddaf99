use crate::checkpoint::OptimizerState;
use crate::encoder::Param;

/// Adam with decoupled weight decay: parameters shrink by `lr · λ · p`
/// before the moment update, and the decay never enters the moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    state: OptimizerState,
}

impl AdamW {
    pub fn new(params: &[Param<f32>], lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f32>> = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            state: OptimizerState {
                step: 0,
                first_moment: zeros.clone(),
                second_moment: zeros,
            },
        }
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }

    /// Restores moments saved by [`AdamW::state`]; shapes must match.
    pub fn load_state(&mut self, state: OptimizerState) -> Result<(), String> {
        let same = |a: &[Vec<f32>], b: &[Vec<f32>]| {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.len() == y.len())
        };
        if !same(&state.first_moment, &self.state.first_moment)
            || !same(&state.second_moment, &self.state.second_moment)
        {
            return Err("optimizer state does not match the parameter layout".into());
        }
        self.state = state;
        Ok(())
    }

    pub fn step(&mut self, params: &mut [Param<f32>], grads: &[Vec<f32>]) {
        self.state.step += 1;
        let t = self.state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let decay = (1.0 - self.lr * self.weight_decay) as f32;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.state.first_moment)
            .zip(&mut self.state.second_moment)
        {
            for i in 0..p.value.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = f64::from(m[i]) / bc1;
                let v_hat = f64::from(v[i]) / bc2;
                let update = self.lr * m_hat / (v_hat.sqrt() + self.eps);
                p.value[i] = p.value[i] * decay - update as f32;
            }
        }
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f32>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|g| f64::from(*g) * f64::from(*g))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = (max_norm / norm) as f32;
        for g in grads.iter_mut().flatten() {
            *g *= s;
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_params() -> Vec<Param<f32>> {
        vec![Param {
            name: "w".into(),
            shape: vec![2],
            value: vec![1.0, -2.0],
        }]
    }

    #[test]
    fn matches_hand_computed_steps() {
        let mut params = two_params();
        let mut opt = AdamW::new(&params, 0.1, 0.5);
        let g = vec![vec![0.5f32, -0.25]];
        opt.step(&mut params, &g);
        // step 1: m̂ = g, v̂ = g², so the Adam part is lr·sign(g)
        // (up to eps); decay shrinks p by lr·λ·p first
        let want = |p: f64, g: f64| p * (1.0 - 0.1 * 0.5) - 0.1 * g / (g.abs() + 1e-8);
        assert!((f64::from(params[0].value[0]) - want(1.0, 0.5)).abs() < 1e-6);
        assert!((f64::from(params[0].value[1]) - want(-2.0, -0.25)).abs() < 1e-6);

        // step 2 with gradient (1, 0)
        let p0 = [f64::from(params[0].value[0]), f64::from(params[0].value[1])];
        opt.step(&mut params, &[vec![1.0, 0.0]]);
        let m = [0.9 * 0.05 + 0.1, 0.9 * -0.025];
        let v = [0.999 * 0.00025 + 0.001, 0.999 * 0.0000625];
        for i in 0..2 {
            let m_hat = m[i] / (1.0 - 0.81);
            let v_hat = v[i] / (1.0 - 0.999f64.powi(2));
            let expect = p0[i] * 0.95 - 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
            assert!((f64::from(params[0].value[i]) - expect).abs() < 1e-5, "{i}");
        }
    }

    #[test]
    fn decay_stays_out_of_the_moments() {
        let mut params = two_params();
        let mut opt = AdamW::new(&params, 0.01, 1.0);
        opt.step(&mut params, &[vec![0.0, 0.0]]);
        // zero gradient: moments stay zero, only the decay acts
        assert!(opt.state().first_moment[0].iter().all(|&m| m == 0.0));
        assert!(opt.state().second_moment[0].iter().all(|&v| v == 0.0));
        assert!((params[0].value[0] - 0.99).abs() < 1e-7);
        assert!((params[0].value[1] + 1.98).abs() < 1e-7);
    }

    #[test]
    fn clipping() {
        let mut g = vec![vec![3.0f32], vec![4.0]];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-7 && (g[1][0] - 0.8).abs() < 1e-7);
        let mut small = vec![vec![0.1f32]];
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small[0][0], 0.1);
    }
}
