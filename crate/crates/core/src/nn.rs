//! Parameter storage and the layer primitives used by the toy networks.
//! Activations are batched `[B, T, C]` tensors.

use elp_autodiff::{Tape, Tensor, Var};
use rand::Rng;

use crate::error::{ElpError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named trainable tensors in declaration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Uniform initialization in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        let tensor = Tensor::new(shape.to_vec(), values)
            .expect("finite uniform values")
            .with_requires_grad(true);
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    /// Multiplies one tensor in place.
    pub fn scale(&mut self, id: ParamId, factor: f64) {
        let t = &mut self.tensors[id.0];
        let values = t.values().iter().map(|v| v * factor).collect();
        t.set_values(values).expect("scaling keeps the shape");
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .flat_map(|t| t.values().iter().copied())
            .collect()
    }

    pub fn load_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.scalar_count() {
            return Err(ElpError::LengthMismatch {
                what: "parameter vector",
                left: values.len(),
                right: self.scalar_count(),
            });
        }
        let mut offset = 0;
        for t in &mut self.tensors {
            let n = t.numel();
            t.set_values(values[offset..offset + n].to_vec())?;
            offset += n;
        }
        Ok(())
    }

    /// Records every parameter on `tape`; gradients are tracked iff `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        Bound(
            self.tensors
                .iter()
                .map(|t| {
                    if trainable {
                        tape.param(t)
                    } else {
                        tape.leaf(&t.clone().with_requires_grad(false))
                    }
                })
                .collect(),
        )
    }
}

/// Tape handles of a [`ParamStore`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

fn last_dim(tape: &Tape, x: Var) -> Result<usize> {
    Ok(*tape.shape(x)?.last().unwrap_or(&0))
}

fn check_width(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(ElpError::WidthMismatch {
            what,
            expected,
            found,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    w: ParamId,
    b: ParamId,
    input: usize,
    output: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let w = store.add_uniform(format!("{name}.weight"), &[input, output], input, rng);
        let b = store.add_uniform(format!("{name}.bias"), &[output], input, rng);
        Self { w, b, input, output }
    }

    pub fn output(&self) -> usize {
        self.output
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        check_width("linear input", self.input, last_dim(tape, x)?)?;
        let y = tape.matmul(x, p.var(self.w))?;
        Ok(tape.add(y, p.var(self.b))?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output keeps the input length (odd kernels).
    Same,
    /// No padding; output shrinks by `dilation * (kernel - 1)`.
    Valid,
}

/// Dilated 1-D convolution over the time axis of `[B, T, C]`.
#[derive(Debug, Clone)]
pub struct Conv1d {
    w: ParamId,
    b: ParamId,
    input: usize,
    output: usize,
    kernel: usize,
    dilation: usize,
    padding: Padding,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        kernel: usize,
        dilation: usize,
        padding: Padding,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = kernel * input;
        let w = store.add_uniform(format!("{name}.weight"), &[fan_in, output], fan_in, rng);
        let b = store.add_uniform(format!("{name}.bias"), &[output], fan_in, rng);
        Self {
            w,
            b,
            input,
            output,
            kernel,
            dilation,
            padding,
        }
    }

    pub fn output(&self) -> usize {
        self.output
    }

    /// Frames consumed beyond the first: `dilation * (kernel - 1)`.
    pub fn span(&self) -> usize {
        self.dilation * (self.kernel - 1)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x)?.to_vec();
        if shape.len() != 3 {
            return Err(ElpError::invalid(format!("conv1d expects [B, T, C], got {shape:?}")));
        }
        check_width("conv1d input", self.input, shape[2])?;
        let (b, t) = (shape[0], shape[1]);
        let span = self.span();
        let (x, t_out) = match self.padding {
            Padding::Same => {
                let pad = span / 2;
                if pad == 0 {
                    (x, t)
                } else {
                    let z = tape.constant([b, pad, self.input], vec![0.0; b * pad * self.input])?;
                    (tape.concat(&[z, x, z], 1)?, t)
                }
            }
            Padding::Valid => {
                if t <= span {
                    return Err(ElpError::TooShort {
                        what: "valid conv1d",
                        min: span + 1,
                        found: t,
                    });
                }
                (x, t - span)
            }
        };
        let taps: Vec<Var> = (0..self.kernel)
            .map(|j| tape.slice(x, 1, j * self.dilation, t_out))
            .collect::<std::result::Result<_, _>>()?;
        let stacked = if taps.len() == 1 {
            taps[0]
        } else {
            tape.concat(&taps, 2)?
        };
        let y = tape.matmul(stacked, p.var(self.w))?;
        Ok(tape.add(y, p.var(self.b))?)
    }
}

/// Gated recurrent unit unrolled over the time axis of `[B, T, C]`, zero
/// initial state.
#[derive(Debug, Clone)]
pub struct Gru {
    w_x: ParamId,
    w_h: ParamId,
    b_x: ParamId,
    b_h: ParamId,
    input: usize,
    hidden: usize,
}

impl Gru {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let w_x = store.add_uniform(format!("{name}.w_x"), &[input, 3 * hidden], hidden, rng);
        let w_h = store.add_uniform(format!("{name}.w_h"), &[hidden, 3 * hidden], hidden, rng);
        let b_x = store.add_uniform(format!("{name}.b_x"), &[3 * hidden], hidden, rng);
        let b_h = store.add_uniform(format!("{name}.b_h"), &[3 * hidden], hidden, rng);
        Self {
            w_x,
            w_h,
            b_x,
            b_h,
            input,
            hidden,
        }
    }

    pub fn output(&self) -> usize {
        self.hidden
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x)?.to_vec();
        check_width("gru input", self.input, shape[2])?;
        let (b, t, h) = (shape[0], shape[1], self.hidden);
        let xw = tape.matmul(x, p.var(self.w_x))?;
        let xw = tape.add(xw, p.var(self.b_x))?;
        let mut state = tape.constant([b, h], vec![0.0; b * h])?;
        let mut outputs = Vec::with_capacity(t);
        for step in 0..t {
            let xt = tape.slice(xw, 1, step, 1)?;
            let xt = tape.reshape(xt, [b, 3 * h])?;
            let hw = tape.matmul(state, p.var(self.w_h))?;
            let hw = tape.add(hw, p.var(self.b_h))?;
            let gate = |tape: &mut Tape, k: usize| -> Result<(Var, Var)> {
                Ok((tape.slice(xt, 1, k * h, h)?, tape.slice(hw, 1, k * h, h)?))
            };
            let (xr, hr) = gate(tape, 0)?;
            let (xz, hz) = gate(tape, 1)?;
            let (xn, hn) = gate(tape, 2)?;
            let r = tape.add(xr, hr)?;
            let r = tape.sigmoid(r)?;
            let z = tape.add(xz, hz)?;
            let z = tape.sigmoid(z)?;
            let rn = tape.mul(r, hn)?;
            let n = tape.add(xn, rn)?;
            let n = tape.tanh(n)?;
            // h' = n + z * (h - n)
            let d = tape.sub(state, n)?;
            let zd = tape.mul(z, d)?;
            state = tape.add(n, zd)?;
            outputs.push(tape.reshape(state, [b, 1, h])?);
        }
        Ok(if outputs.len() == 1 {
            outputs[0]
        } else {
            tape.concat(&outputs, 1)?
        })
    }
}

/// Inverted dropout with a freshly drawn mask; identity when `p == 0`.
pub fn dropout(tape: &mut Tape, x: Var, p: f64, rng: &mut impl Rng) -> Result<Var> {
    if p <= 0.0 {
        return Ok(x);
    }
    let shape = tape.shape(x)?.to_vec();
    let n: usize = shape.iter().product();
    let keep = 1.0 / (1.0 - p);
    let mask = (0..n)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    let m = tape.constant(shape, mask)?;
    Ok(tape.mul(x, m)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn input(tape: &mut Tape, shape: [usize; 3], seed: u64) -> (Var, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        (tape.constant(shape, v.clone()).unwrap(), v)
    }

    #[test]
    fn conv_same_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let conv = Conv1d::new(&mut store, "c", 2, 3, 3, 2, Padding::Same, &mut rng);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let (x, xv) = input(&mut tape, [1, 7, 2], 1);
        let y = conv.forward(&mut tape, &p, x).unwrap();
        assert_eq!(tape.shape(y).unwrap(), &[1, 7, 3]);
        let w = store.tensors()[0].values();
        let bias = store.tensors()[1].values();
        let yv = tape.value(y).unwrap();
        for t in 0..7usize {
            for o in 0..3 {
                let mut acc = bias[o];
                for j in 0..3usize {
                    let src = t as isize + (j as isize - 1) * 2;
                    if (0..7).contains(&src) {
                        for c in 0..2 {
                            acc += xv[src as usize * 2 + c] * w[(j * 2 + c) * 3 + o];
                        }
                    }
                }
                assert!((yv[t * 3 + o] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn valid_conv_shrinks_and_rejects_short_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let conv = Conv1d::new(&mut store, "c", 2, 2, 3, 3, Padding::Valid, &mut rng);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let (x, _) = input(&mut tape, [2, 10, 2], 1);
        let y = conv.forward(&mut tape, &p, x).unwrap();
        assert_eq!(tape.shape(y).unwrap(), &[2, 4, 2]);
        let (short, _) = input(&mut tape, [1, 6, 2], 1);
        assert!(matches!(
            conv.forward(&mut tape, &p, short),
            Err(ElpError::TooShort { min: 7, .. })
        ));
    }

    #[test]
    fn gru_matches_scalar_recurrence() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let gru = Gru::new(&mut store, "g", 1, 1, &mut rng);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let (x, xv) = input(&mut tape, [1, 5, 1], 4);
        let y = gru.forward(&mut tape, &p, x).unwrap();
        let [wx, wh, bx, bh] = [0, 1, 2, 3].map(|i| store.tensors()[i].values().to_vec());
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut h = 0.0;
        for (t, &xt) in xv.iter().enumerate() {
            let r = sig(xt * wx[0] + bx[0] + h * wh[0] + bh[0]);
            let z = sig(xt * wx[1] + bx[1] + h * wh[1] + bh[1]);
            let n = (xt * wx[2] + bx[2] + r * (h * wh[2] + bh[2])).tanh();
            h = (1.0 - z) * n + z * h;
            assert!((tape.value(y).unwrap()[t] - h).abs() < 1e-12);
        }
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        Linear::new(&mut store, "l", 16, 4, &mut rng);
        assert!(store.tensors()[0].values().iter().all(|v| v.abs() <= 0.25));
        assert_eq!(store.names(), &["l.weight", "l.bias"]);
        let flat = store.flatten();
        let mut copy = store.clone();
        copy.load_flat(&flat).unwrap();
        assert_eq!(copy.flatten(), flat);
        assert!(copy.load_flat(&flat[1..]).is_err());
    }

    #[test]
    fn dropout_zero_is_identity_and_scales_kept_units() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let x = tape.constant([1, 1000, 1], vec![1.0; 1000]).unwrap();
        assert_eq!(dropout(&mut tape, x, 0.0, &mut rng).unwrap(), x);
        let y = dropout(&mut tape, x, 0.5, &mut rng).unwrap();
        let v = tape.value(y).unwrap();
        assert!(v.iter().all(|&u| u == 0.0 || u == 2.0));
        let kept = v.iter().filter(|&&u| u > 0.0).count();
        assert!((400..600).contains(&kept));
    }
}
