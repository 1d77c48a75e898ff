//! Classifiers: plain `p(y | x)`, time-conditional `p(y | x, t)` and
//! denoising-augmented `p(y | x, x_hat, t)`, plus the exact Bayes referee.

use serde::{Deserialize, Serialize};

use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::gmm::GaussianMixture;
use crate::linalg::Matrix;
use crate::nnet::{
    time_embedding, Activation, Checkpoint, InputBlock, Mlp, ModelMeta, NetworkSpec, OutputHead,
    Tape, TrainingMeta, Var,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassifierKind {
    Plain,
    Noisy,
    DenoisingAugmented,
}

impl ClassifierKind {
    pub fn spec(self, dim: usize, classes: usize, hidden: &[usize], emb_width: usize, seed: u64) -> NetworkSpec {
        let inputs = match self {
            ClassifierKind::Plain => vec![InputBlock::State { dim }],
            ClassifierKind::Noisy => vec![InputBlock::State { dim }, InputBlock::Time { width: emb_width }],
            ClassifierKind::DenoisingAugmented => vec![
                InputBlock::State { dim },
                InputBlock::Denoised { dim },
                InputBlock::Time { width: emb_width },
            ],
        };
        NetworkSpec {
            inputs,
            hidden_widths: hidden.to_vec(),
            activation: Activation::Tanh,
            output: OutputHead::Logits { classes },
            init_seed: seed,
            zero_init_output: true,
        }
    }
}

/// Anything that maps data-scale points to class probabilities.
pub trait PointClassifier: Send + Sync {
    fn num_classes(&self) -> usize;
    fn probs(&self, x: &Matrix) -> Result<Matrix>;
}

/// Row-wise argmax; ties resolve to the lowest index.
pub fn argmax_rows(p: &Matrix) -> Vec<usize> {
    (0..p.nrows())
        .map(|i| {
            let mut best = 0;
            for j in 1..p.ncols() {
                if p[(i, j)] > p[(i, best)] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Shannon entropy (nats) of each probability row.
pub fn entropy_rows(p: &Matrix) -> Vec<f64> {
    (0..p.nrows())
        .map(|i| {
            -p.row(i)
                .iter()
                .filter(|&&v| v > 0.0)
                .map(|&v| v * v.ln())
                .sum::<f64>()
        })
        .collect()
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
    hits as f64 / labels.len().max(1) as f64
}

/// Inputs for one evaluation. Which fields are needed depends on the kind.
#[derive(Clone, Copy, Debug)]
pub struct ClassifierInput<'a> {
    pub x: &'a Matrix,
    pub denoised: Option<&'a Matrix>,
    pub t: Option<&'a [f64]>,
}

impl<'a> ClassifierInput<'a> {
    pub fn plain(x: &'a Matrix) -> Self {
        ClassifierInput { x, denoised: None, t: None }
    }

    pub fn noisy(x: &'a Matrix, t: &'a [f64]) -> Self {
        ClassifierInput { x, denoised: None, t: Some(t) }
    }

    pub fn augmented(x: &'a Matrix, denoised: &'a Matrix, t: &'a [f64]) -> Self {
        ClassifierInput { x, denoised: Some(denoised), t: Some(t) }
    }
}

#[derive(Clone, Debug)]
pub struct NetClassifier {
    net: Mlp,
    kind: ClassifierKind,
    schedule: DiffusionSchedule,
    data_var: f64,
    dim: usize,
    classes: usize,
    emb_width: usize,
}

impl NetClassifier {
    pub fn new(net: Mlp, kind: ClassifierKind, schedule: DiffusionSchedule, data_var: f64) -> Result<Self> {
        let spec = net.spec();
        let (dim, emb_width) = match (kind, spec.inputs.as_slice()) {
            (ClassifierKind::Plain, [InputBlock::State { dim }]) => (*dim, 0),
            (ClassifierKind::Noisy, [InputBlock::State { dim }, InputBlock::Time { width }]) => (*dim, *width),
            (
                ClassifierKind::DenoisingAugmented,
                [InputBlock::State { dim }, InputBlock::Denoised { dim: d2 }, InputBlock::Time { width }],
            ) if dim == d2 => (*dim, *width),
            (k, blocks) => {
                return Err(Error::Config(format!("{k:?} classifier cannot take blocks {blocks:?}")))
            }
        };
        let OutputHead::Logits { classes } = spec.output else {
            return Err(Error::Config("classifier needs a logits head".into()));
        };
        Ok(NetClassifier { net, kind, schedule, data_var, dim, classes, emb_width })
    }

    pub fn kind(&self) -> ClassifierKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
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

    pub fn data_var(&self) -> f64 {
        self.data_var
    }

    /// Scale applied to the noisy block: `1 / sqrt(m^2 var + sigma^2)`.
    pub fn input_scale(&self, t: f64) -> f64 {
        let m = self.schedule.mean_coeff_raw(t);
        1.0 / (m * m * self.data_var + self.schedule.sigma_raw(t).powi(2)).sqrt()
    }

    /// Records the logits. `x` is the noisy (or, for plain, the only) input.
    pub fn logits_tape<'a>(
        &self,
        tape: &mut Tape<'a>,
        x: Var,
        denoised: Option<Var>,
        t: Option<&[f64]>,
    ) -> Result<(Var, crate::nnet::TapedNet)> {
        let inputs = match self.kind {
            ClassifierKind::Plain => vec![x],
            ClassifierKind::Noisy | ClassifierKind::DenoisingAugmented => {
                let t = t.ok_or(Error::Contract("time"))?;
                let scaled = tape.scale_rows(x, t.iter().map(|&ti| self.input_scale(ti)).collect());
                let emb = tape.leaf(time_embedding(t, self.emb_width));
                if self.kind == ClassifierKind::Noisy {
                    vec![scaled, emb]
                } else {
                    vec![scaled, denoised.ok_or(Error::Contract("denoised"))?, emb]
                }
            }
        };
        let net = self.net.forward_tape(tape, &inputs)?;
        Ok((net.output, net))
    }

    pub fn log_probs(&self, input: &ClassifierInput) -> Result<Matrix> {
        let mut tape = Tape::new();
        let x = tape.leaf(input.x.clone());
        let d = input.denoised.map(|m| tape.leaf(m.clone()));
        if self.kind == ClassifierKind::Plain && (d.is_some() || input.t.is_some()) {
            return Err(Error::Contract("time or denoised"));
        }
        let (logits, _) = self.logits_tape(&mut tape, x, d, input.t)?;
        let lp = tape.log_softmax(logits);
        Ok(tape.value(lp).clone())
    }

    pub fn probs_for(&self, input: &ClassifierInput) -> Result<Matrix> {
        Ok(self.log_probs(input)?.map(f64::exp))
    }

    pub fn predict(&self, input: &ClassifierInput) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.log_probs(input)?))
    }

    pub fn to_checkpoint(&self, meta: TrainingMeta) -> Checkpoint {
        Checkpoint::new(
            &self.net,
            ModelMeta::Classifier { kind: self.kind, schedule: self.schedule, data_var: self.data_var },
            meta,
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        match &ck.model {
            ModelMeta::Classifier { kind, schedule, data_var } => {
                Self::new(ck.network()?, *kind, *schedule, *data_var)
            }
            other => Err(Error::Config(format!("checkpoint holds {other:?}, not a classifier"))),
        }
    }
}

impl PointClassifier for NetClassifier {
    fn num_classes(&self) -> usize {
        self.classes
    }

    fn probs(&self, x: &Matrix) -> Result<Matrix> {
        if self.kind != ClassifierKind::Plain {
            return Err(Error::Contract("plain data-scale"));
        }
        self.probs_for(&ClassifierInput::plain(x))
    }
}

/// Exact posterior `p0(y | x)` of the clean mixture.
#[derive(Clone, Debug)]
pub struct BayesClassifier {
    pub gmm: GaussianMixture,
}

impl BayesClassifier {
    pub fn new(gmm: GaussianMixture) -> Result<Self> {
        if gmm.classes().is_none() {
            return Err(Error::Config("Bayes classifier needs class labels".into()));
        }
        Ok(BayesClassifier { gmm })
    }
}

impl PointClassifier for BayesClassifier {
    fn num_classes(&self) -> usize {
        self.gmm.num_classes()
    }

    fn probs(&self, x: &Matrix) -> Result<Matrix> {
        let clean = self.gmm.clean();
        let mut out = Matrix::zeros(x.nrows(), self.num_classes());
        let mut buf = vec![0.0; x.ncols()];
        for i in 0..x.nrows() {
            for (j, b) in buf.iter_mut().enumerate() {
                *b = x[(i, j)];
            }
            for (y, p) in clean.class_posterior(&buf).into_iter().enumerate() {
                out[(i, y)] = p;
            }
        }
        Ok(out)
    }
}
