//! Score models `s(x, t) ~ grad_x log p_t(x)`.
//!
//! The analytic mixture score and a learned network implement the same
//! trait, so every downstream routine runs with either.

use crate::diffusion::DiffusionSchedule;
use crate::error::{check_time, Error, Result};
use crate::gmm::{DiffusedMixture, GaussianMixture};
use crate::linalg::{row, Matrix, Vector};
use crate::nnet::{time_embedding, Checkpoint, InputBlock, Mlp, ModelMeta, OutputHead, Tape, TrainingMeta, Var};

pub trait ScoreModel: Send + Sync {
    fn dim(&self) -> usize;

    /// Scores of a batch, row `i` evaluated at time `t[i]`.
    fn score_batch(&self, x: &Matrix, t: &[f64]) -> Result<Matrix>;

    /// Records the score on `tape` so cotangents reach `x`.
    fn score_tape<'a>(&'a self, tape: &mut Tape<'a>, x: Var, t: &[f64]) -> Result<Var>;

    fn score(&self, x: &Vector, t: f64) -> Result<Vector> {
        let m = Matrix::from_row_slice(1, x.len(), x.as_slice());
        Ok(row(&self.score_batch(&m, &[t])?, 0))
    }
}

fn check_batch(x: &Matrix, t: &[f64], dim: usize) -> Result<()> {
    if x.ncols() != dim || x.nrows() != t.len() {
        return Err(Error::Shape(format!(
            "score expects n x {dim} points with n times, got {}x{} and {} times",
            x.nrows(),
            x.ncols(),
            t.len()
        )));
    }
    t.iter().try_for_each(|&ti| check_time(ti))
}

/// Exact score of a diffused Gaussian mixture.
#[derive(Clone, Debug)]
pub struct AnalyticScore {
    pub gmm: GaussianMixture,
    pub schedule: DiffusionSchedule,
}

impl AnalyticScore {
    pub fn new(gmm: GaussianMixture, schedule: DiffusionSchedule) -> Self {
        AnalyticScore { gmm, schedule }
    }

    /// Walks rows, rebuilding the diffused mixture only when the time changes.
    fn for_rows(&self, x: &Matrix, t: &[f64], mut f: impl FnMut(usize, &DiffusedMixture, &[f64])) {
        let mut cached: Option<(f64, DiffusedMixture)> = None;
        let mut buf = vec![0.0; x.ncols()];
        for i in 0..x.nrows() {
            if cached.as_ref().is_none_or(|(ct, _)| *ct != t[i]) {
                let dm = self.gmm.diffused(
                    self.schedule.mean_coeff_raw(t[i]),
                    self.schedule.sigma_raw(t[i]),
                );
                cached = Some((t[i], dm));
            }
            for (j, b) in buf.iter_mut().enumerate() {
                *b = x[(i, j)];
            }
            f(i, &cached.as_ref().unwrap().1, &buf);
        }
    }

    /// Jacobian of the score (Hessian of `log p_t`) per row.
    pub fn hessian_batch(&self, x: &Matrix, t: &[f64]) -> Result<Vec<Matrix>> {
        check_batch(x, t, self.dim())?;
        let mut out = Vec::with_capacity(x.nrows());
        self.for_rows(x, t, |_, dm, p| out.push(dm.hessian(p)));
        Ok(out)
    }
}

impl ScoreModel for AnalyticScore {
    fn dim(&self) -> usize {
        self.gmm.dim()
    }

    fn score_batch(&self, x: &Matrix, t: &[f64]) -> Result<Matrix> {
        check_batch(x, t, self.dim())?;
        let mut out = Matrix::zeros(x.nrows(), x.ncols());
        self.for_rows(x, t, |i, dm, p| {
            let s = dm.score(p);
            for j in 0..s.len() {
                out[(i, j)] = s[j];
            }
        });
        Ok(out)
    }

    fn score_tape<'a>(&'a self, tape: &mut Tape<'a>, x: Var, t: &[f64]) -> Result<Var> {
        let xv = tape.value(x).clone();
        let value = self.score_batch(&xv, t)?;
        let hess = self.hessian_batch(&xv, t)?;
        Ok(tape.custom(x, value, move |g| {
            let mut out = Matrix::zeros(g.nrows(), g.ncols());
            for (i, h) in hess.iter().enumerate() {
                // symmetric Jacobian: vjp = H g_i
                let gi = g.row(i).transpose();
                let v = h * gi;
                for j in 0..v.len() {
                    out[(i, j)] = v[j];
                }
            }
            out
        }))
    }
}

/// Learned score through a preconditioned denoiser on the data scale.
///
/// With `y = x / m`, `u = sigma / m` and data variance `v`, the network
/// output `F` gives `D = c_skip y + c_out F` where `c_skip = v / (u^2 + v)`,
/// `c_out = u sqrt(v) / sqrt(u^2 + v)`, and the score is
/// `(m D - x) / sigma^2`. Inputs are `c_in y` with `c_in = 1 / sqrt(u^2 + v)`.
/// A zero output is the score of a centred Gaussian with variance `v`.
#[derive(Clone, Debug)]
pub struct NetScore {
    net: Mlp,
    schedule: DiffusionSchedule,
    data_var: f64,
    dim: usize,
    emb_width: usize,
}

pub(crate) const SIGMA_FLOOR: f64 = 1e-8;

impl NetScore {
    pub fn new(net: Mlp, schedule: DiffusionSchedule, data_var: f64) -> Result<Self> {
        let spec = net.spec();
        let (dim, emb_width) = match spec.inputs.as_slice() {
            [InputBlock::State { dim }, InputBlock::Time { width }] => (*dim, *width),
            other => {
                return Err(Error::Config(format!(
                    "score network needs [state, time] inputs, got {other:?}"
                )))
            }
        };
        if spec.output != (OutputHead::Regression { dim }) {
            return Err(Error::Config("score network must regress a state-sized vector".into()));
        }
        Ok(NetScore {
            net,
            schedule,
            data_var,
            dim,
            emb_width,
        })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }

    pub fn input_scale(&self, t: f64) -> f64 {
        let m = self.schedule.mean_coeff_raw(t);
        1.0 / (m * m * self.data_var + self.schedule.sigma_raw(t).powi(2)).sqrt()
    }

    /// Network inputs `[c_in x, emb(t)]` as tape leaves/nodes.
    pub(crate) fn inputs_tape<'a>(&self, tape: &mut Tape<'a>, x: Var, t: &[f64]) -> (Var, Var) {
        let scaled = tape.scale_rows(x, t.iter().map(|&ti| self.input_scale(ti)).collect());
        let emb = tape.leaf(time_embedding(t, self.emb_width));
        (scaled, emb)
    }

    /// `sigma * score`, the predicted `-eps`.
    pub(crate) fn output_tape<'a>(&self, tape: &mut Tape<'a>, x: Var, t: &[f64]) -> Result<(Var, crate::nnet::TapedNet)> {
        let (xi, emb) = self.inputs_tape(tape, x, t);
        let net = self.net.forward_tape(tape, &[xi, emb])?;
        let v = self.data_var;
        let mut a = Vec::with_capacity(t.len());
        let mut b = Vec::with_capacity(t.len());
        for &ti in t {
            let m = self.schedule.mean_coeff_raw(ti);
            let u = (self.schedule.sigma_raw(ti) / m).max(SIGMA_FLOOR);
            // sigma s = -u y / (u^2 + v) + sqrt(v) F / sqrt(u^2 + v)
            a.push(-u / (m * (u * u + v)));
            b.push(v.sqrt() / (u * u + v).sqrt());
        }
        let skip = tape.scale_rows(x, a);
        let out = tape.scale_rows(net.output, b);
        Ok((tape.add(skip, out), net))
    }

    pub fn to_checkpoint(&self, meta: TrainingMeta) -> Checkpoint {
        Checkpoint::new(
            &self.net,
            ModelMeta::Score {
                schedule: self.schedule,
                data_var: self.data_var,
            },
            meta,
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        match &ck.model {
            ModelMeta::Score { schedule, data_var } => Self::new(ck.network()?, *schedule, *data_var),
            other => Err(Error::Config(format!("checkpoint holds {other:?}, not a score model"))),
        }
    }
}

impl ScoreModel for NetScore {
    fn dim(&self) -> usize {
        self.dim
    }

    fn score_batch(&self, x: &Matrix, t: &[f64]) -> Result<Matrix> {
        check_batch(x, t, self.dim)?;
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let s = self.score_tape(&mut tape, xv, t)?;
        Ok(tape.value(s).clone())
    }

    fn score_tape<'a>(&'a self, tape: &mut Tape<'a>, x: Var, t: &[f64]) -> Result<Var> {
        check_batch(tape.value(x), t, self.dim)?;
        let (out, _) = self.output_tape(tape, x, t)?;
        let inv: Vec<f64> = t
            .iter()
            .map(|&ti| 1.0 / self.schedule.sigma_raw(ti).max(SIGMA_FLOOR))
            .collect();
        Ok(tape.scale_rows(out, inv))
    }
}
