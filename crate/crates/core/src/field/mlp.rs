//! Two-layer dense network `dense(in -> hidden) -> ReLU -> dense(hidden -> out)`
//! with all parameters in one flat vector.

use rand::Rng;
use rand_distr::{Distribution, Normal};

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    /// `w1 (hidden x input) | b1 (hidden) | w2 (output x hidden) | b2 (output)`.
    pub params: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct MlpRecord {
    pub input: Vec<f64>,
    pub hidden_pre: Vec<f64>,
}

impl Mlp {
    pub fn param_count(input: usize, hidden: usize, output: usize) -> usize {
        hidden * input + hidden + output * hidden + output
    }

    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            input,
            hidden,
            output,
            params: vec![0.0; Self::param_count(input, hidden, output)],
        }
    }

    /// He-normal weights, zero biases.
    pub fn he_init(input: usize, hidden: usize, output: usize, rng: &mut impl Rng) -> Self {
        let mut mlp = Self::zeros(input, hidden, output);
        let n1 = Normal::new(0.0, (2.0 / input as f64).sqrt()).unwrap();
        let n2 = Normal::new(0.0, (2.0 / hidden as f64).sqrt()).unwrap();
        let (w1, rest) = mlp.params.split_at_mut(hidden * input);
        for w in w1 {
            *w = n1.sample(rng);
        }
        let w2 = &mut rest[hidden..hidden + output * hidden];
        for w in w2 {
            *w = n2.sample(rng);
        }
        mlp
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let b1 = self.hidden * self.input;
        let w2 = b1 + self.hidden;
        let b2 = w2 + self.output * self.hidden;
        (b1, w2, b2)
    }

    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, MlpRecord) {
        assert_eq!(x.len(), self.input);
        let (ob1, ow2, ob2) = self.offsets();
        let p = &self.params;
        let mut pre = vec![0.0; self.hidden];
        for (h, v) in pre.iter_mut().enumerate() {
            let row = &p[h * self.input..(h + 1) * self.input];
            *v = p[ob1 + h] + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>();
        }
        let mut out = vec![0.0; self.output];
        for (o, v) in out.iter_mut().enumerate() {
            let row = &p[ow2 + o * self.hidden..ow2 + (o + 1) * self.hidden];
            *v = p[ob2 + o]
                + row
                    .iter()
                    .zip(&pre)
                    .map(|(w, h)| w * h.max(0.0))
                    .sum::<f64>();
        }
        (
            out,
            MlpRecord {
                input: x.to_vec(),
                hidden_pre: pre,
            },
        )
    }

    /// Adds parameter gradients into `dparams` and returns `dL/dx`.
    pub fn backward(&self, rec: &MlpRecord, upstream: &[f64], dparams: &mut [f64]) -> Vec<f64> {
        let (ob1, ow2, ob2) = self.offsets();
        let p = &self.params;
        let mut dhidden = vec![0.0; self.hidden];
        for (o, u) in upstream.iter().enumerate() {
            if *u == 0.0 {
                continue;
            }
            dparams[ob2 + o] += u;
            for h in 0..self.hidden {
                dparams[ow2 + o * self.hidden + h] += u * rec.hidden_pre[h].max(0.0);
                dhidden[h] += u * p[ow2 + o * self.hidden + h];
            }
        }
        let mut dx = vec![0.0; self.input];
        for h in 0..self.hidden {
            if rec.hidden_pre[h] <= 0.0 || dhidden[h] == 0.0 {
                continue;
            }
            let g = dhidden[h];
            dparams[ob1 + h] += g;
            for i in 0..self.input {
                dparams[h * self.input + i] += g * rec.input[i];
                dx[i] += g * p[h * self.input + i];
            }
        }
        dx
    }
}
