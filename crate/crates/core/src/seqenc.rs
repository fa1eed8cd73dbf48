//! Single-layer unidirectional GRU.
//!
//! ```text
//! z  = sigmoid(W_z x + U_z h + b_z)
//! r  = sigmoid(W_r x + U_r h + b_r)
//! h~ = tanh(W_h x + U_h (r * h) + b_h)
//! h' = (1 - z) * h + z * h~
//! ```

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::diffcore::{Matrix, Parameters, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GruParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w_z: Matrix,
    pub w_r: Matrix,
    pub w_h: Matrix,
    pub u_z: Matrix,
    pub u_r: Matrix,
    pub u_h: Matrix,
    pub b_z: Matrix,
    pub b_r: Matrix,
    pub b_h: Matrix,
}

/// Glorot-uniform draw for a `rows x cols` weight.
pub fn glorot_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

impl GruParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        let w = || Matrix::zeros(hidden_dim, input_dim);
        let u = || Matrix::zeros(hidden_dim, hidden_dim);
        let b = || Matrix::zeros(hidden_dim, 1);
        GruParams {
            input_dim,
            hidden_dim,
            w_z: w(),
            w_r: w(),
            w_h: w(),
            u_z: u(),
            u_r: u(),
            u_h: u(),
            b_z: b(),
            b_r: b(),
            b_h: b(),
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(input_dim: usize, hidden_dim: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(input_dim, hidden_dim);
        p.w_z = glorot_uniform(hidden_dim, input_dim, rng);
        p.w_r = glorot_uniform(hidden_dim, input_dim, rng);
        p.w_h = glorot_uniform(hidden_dim, input_dim, rng);
        p.u_z = glorot_uniform(hidden_dim, hidden_dim, rng);
        p.u_r = glorot_uniform(hidden_dim, hidden_dim, rng);
        p.u_h = glorot_uniform(hidden_dim, hidden_dim, rng);
        p
    }

    pub fn validate(&self) -> Result<()> {
        let (i, h) = (self.input_dim, self.hidden_dim);
        let expect = [
            (&self.w_z, (h, i)),
            (&self.w_r, (h, i)),
            (&self.w_h, (h, i)),
            (&self.u_z, (h, h)),
            (&self.u_r, (h, h)),
            (&self.u_h, (h, h)),
            (&self.b_z, (h, 1)),
            (&self.b_r, (h, 1)),
            (&self.b_h, (h, 1)),
        ];
        for (m, shape) in expect {
            if m.shape() != shape {
                return Err(Error::Shape {
                    primitive: "gru_params",
                    lhs: m.shape(),
                    rhs: shape,
                });
            }
        }
        Ok(())
    }

    fn fields(&self) -> [(&'static str, &Matrix); 9] {
        [
            ("w_z", &self.w_z),
            ("w_r", &self.w_r),
            ("w_h", &self.w_h),
            ("u_z", &self.u_z),
            ("u_r", &self.u_r),
            ("u_h", &self.u_h),
            ("b_z", &self.b_z),
            ("b_r", &self.b_r),
            ("b_h", &self.b_h),
        ]
    }

    fn fields_mut(&mut self) -> [(&'static str, &mut Matrix); 9] {
        [
            ("w_z", &mut self.w_z),
            ("w_r", &mut self.w_r),
            ("w_h", &mut self.w_h),
            ("u_z", &mut self.u_z),
            ("u_r", &mut self.u_r),
            ("u_h", &mut self.u_h),
            ("b_z", &mut self.b_z),
            ("b_r", &mut self.b_r),
            ("b_h", &mut self.b_h),
        ]
    }

    /// Matrices with names prefixed by `prefix.`.
    pub fn named_with(&self, prefix: &str) -> Vec<(String, &Matrix)> {
        self.fields()
            .into_iter()
            .map(|(n, m)| (format!("{prefix}.{n}"), m))
            .collect()
    }

    pub fn named_with_mut(&mut self, prefix: &str) -> Vec<(String, &mut Matrix)> {
        self.fields_mut()
            .into_iter()
            .map(|(n, m)| (format!("{prefix}.{n}"), m))
            .collect()
    }

    /// Registers the weights as trainable leaves named `prefix.w_z` etc.
    pub fn register(&self, tape: &mut Tape, prefix: &str) -> GruVars {
        let mut p = |n: &str, m: &Matrix| tape.param(&format!("{prefix}.{n}"), m);
        GruVars {
            input_dim: self.input_dim,
            hidden_dim: self.hidden_dim,
            w_z: p("w_z", &self.w_z),
            w_r: p("w_r", &self.w_r),
            w_h: p("w_h", &self.w_h),
            u_z: p("u_z", &self.u_z),
            u_r: p("u_r", &self.u_r),
            u_h: p("u_h", &self.u_h),
            b_z: p("b_z", &self.b_z),
            b_r: p("b_r", &self.b_r),
            b_h: p("b_h", &self.b_h),
        }
    }

    /// One step on plain matrices.
    pub fn step(&self, x: &Matrix, h: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let g = self.register(&mut tape, "gru");
        let x = tape.constant(x.clone());
        let h = tape.constant(h.clone());
        let out = gru_step(&mut tape, &g, x, h)?;
        Ok(tape.value(out).clone())
    }

    /// Full sequence on plain matrices.
    pub fn encode(&self, seq: &[Matrix], h0: &Matrix) -> Result<Vec<Matrix>> {
        let mut tape = Tape::new();
        let g = self.register(&mut tape, "gru");
        let xs: Vec<Var> = seq.iter().map(|x| tape.constant(x.clone())).collect();
        let h0 = tape.constant(h0.clone());
        let states = gru_encode(&mut tape, &g, &xs, h0)?;
        Ok(states.iter().map(|s| tape.value(*s).clone()).collect())
    }
}

impl Parameters for GruParams {
    fn named(&self) -> Vec<(String, &Matrix)> {
        self.named_with("gru")
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        self.named_with_mut("gru")
    }
}

/// Tape handles for one registered [`GruParams`].
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub input_dim: usize,
    pub hidden_dim: usize,
    w_z: Var,
    w_r: Var,
    w_h: Var,
    u_z: Var,
    u_r: Var,
    u_h: Var,
    b_z: Var,
    b_r: Var,
    b_h: Var,
}

pub fn gru_step(tape: &mut Tape, g: &GruVars, x: Var, h: Var) -> Result<Var> {
    if tape.value(x).shape() != (g.input_dim, 1) {
        return Err(Error::Shape {
            primitive: "gru_step(x)",
            lhs: tape.value(x).shape(),
            rhs: (g.input_dim, 1),
        });
    }
    if tape.value(h).shape() != (g.hidden_dim, 1) {
        return Err(Error::Shape {
            primitive: "gru_step(h)",
            lhs: tape.value(h).shape(),
            rhs: (g.hidden_dim, 1),
        });
    }
    let gate = |tape: &mut Tape, w: Var, u: Var, b: Var, hidden: Var| -> Result<Var> {
        let wx = tape.matmul(w, x)?;
        let uh = tape.matmul(u, hidden)?;
        let s = tape.add(wx, uh)?;
        tape.add(s, b)
    };
    let z_pre = gate(tape, g.w_z, g.u_z, g.b_z, h)?;
    let z = tape.sigmoid(z_pre)?;
    let r_pre = gate(tape, g.w_r, g.u_r, g.b_r, h)?;
    let r = tape.sigmoid(r_pre)?;
    let rh = tape.mul(r, h)?;
    let cand_pre = gate(tape, g.w_h, g.u_h, g.b_h, rh)?;
    let cand = tape.tanh(cand_pre)?;

    let neg_z = tape.scale(z, -1.0)?;
    let keep = tape.add_scalar(neg_z, 1.0)?;
    let kept = tape.mul(keep, h)?;
    let fresh = tape.mul(z, cand)?;
    tape.add(kept, fresh)
}

/// Runs the GRU over `seq` from `h0` and returns one state per input.
pub fn gru_encode(tape: &mut Tape, g: &GruVars, seq: &[Var], h0: Var) -> Result<Vec<Var>> {
    if seq.is_empty() {
        return Err(Error::Empty("gru_encode"));
    }
    let mut states = Vec::with_capacity(seq.len());
    let mut h = h0;
    for &x in seq {
        h = gru_step(tape, g, x, h)?;
        states.push(h);
    }
    Ok(states)
}
