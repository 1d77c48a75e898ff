use std::fmt::Write as _;
use std::path::Path;

use serde_json::{json, Value};

use super::{Command, RunDir, Summary};
use crate::analysis::{
    default_fd_step, denoiser_jacobian_fd, eigen_alignment, input_gradient_decomposition, random_queries,
    svd_jacobian, verify_theorem1,
};
use crate::classifier::{accuracy, entropy_rows, ClassifierInput, ClassifierKind, NetClassifier, PointClassifier};
use crate::config::{ExperimentConfig, ScoreSource, Variant};
use crate::diffusion::{pc_sample_model, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::evaluation::{
    auroc, certification_csv, certified_accuracy_curve, certify_dds, ood_csv, ood_scores, predict_mode,
    shift_eval, spearman, DeContext, EnsembleConfig, EvalMode, OodMode, ShiftRow, ShiftSpec,
};
use crate::gmm::{sample_dataset, Dataset, GaussianMixture};
use crate::guided::{
    guided_sample, prdc_classwise, purity, BayesGuidance, GuidanceClassifier, GuidanceConfig, GuidanceKind,
    NetGuidance,
};
use crate::linalg::{stack_rows, Matrix, Vector};
use crate::nnet::{Activation, Checkpoint, InputBlock, NetworkSpec, OutputHead, TrainingMeta};
use crate::rng::{self, derive_seed};
use crate::score::{AnalyticScore, NetScore, ScoreModel};
use crate::training::{
    diffused_eval_inputs, entropy_curve, score_relative_error, train_classifier, train_da_guidance,
    train_noisy_guidance, train_score, Ablation, LossTrace,
};

pub(super) fn dispatch(cmd: Command, cfg: &ExperimentConfig, seed: u64, dir: &mut RunDir) -> Result<()> {
    let ctx = Ctx::new(cfg, seed, dir.hash.clone())?;
    match cmd {
        Command::TrainScore => cmd_train_score(&ctx, dir),
        Command::TrainClassifier => cmd_train_classifier(&ctx, dir),
        Command::TrainGuidance => cmd_train_guidance(&ctx, dir),
        Command::EvalShift => cmd_eval_shift(&ctx, dir, &cfg.shift.modes),
        Command::EvalDe => cmd_eval_de(&ctx, dir),
        Command::EntropyCurve => cmd_entropy_curve(&ctx, dir),
        Command::Certify => cmd_certify(&ctx, dir),
        Command::Ood => cmd_ood(&ctx, dir),
        Command::VerifyTheorem1 => cmd_verify_theorem1(&ctx, dir),
        Command::DecomposeGradient => cmd_decompose_gradient(&ctx, dir),
        Command::SvdJacobian => cmd_svd_jacobian(&ctx, dir),
        Command::Sample => cmd_sample(&ctx, dir),
        Command::SampleGuided => cmd_sample_guided(&ctx, dir),
        Command::Prdc => cmd_prdc(&ctx, dir),
        Command::Report => unreachable!("report does not run per seed"),
    }
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    seed: u64,
    hash: String,
    gmm: GaussianMixture,
    schedule: DiffusionSchedule,
}

fn kind_name(k: GuidanceKind) -> &'static str {
    match k {
        GuidanceKind::Noisy => "noisy",
        GuidanceKind::DenoisingAugmented => "denoising-augmented",
        GuidanceKind::Bayes => "bayes",
    }
}

fn ood_mode_name(m: OodMode) -> String {
    match m {
        OodMode::Clean => "clean".into(),
        OodMode::Diffaug { t } => format!("diffaug-t{t}"),
    }
}

fn meta(steps: usize, trace: &LossTrace, hash: &str) -> TrainingMeta {
    TrainingMeta { steps, loss_digest: trace.digest(), config_hash: hash.to_string() }
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

fn point_cols(d: usize) -> String {
    (0..d).map(|j| format!("x{j}")).collect::<Vec<_>>().join(",")
}

fn join(v: impl IntoIterator<Item = f64>) -> String {
    v.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl<'a> Ctx<'a> {
    fn new(cfg: &'a ExperimentConfig, seed: u64, hash: String) -> Result<Self> {
        let gmm = match &cfg.fixture {
            Some(p) => GaussianMixture::load(p)?,
            None => GaussianMixture::canonical(),
        };
        Ok(Ctx { cfg, seed, hash, gmm, schedule: cfg.schedule })
    }

    fn dim(&self) -> usize {
        self.gmm.dim()
    }

    fn sample(&self, n: usize, stream_seed: u64) -> Result<Dataset> {
        Ok(Dataset::from_examples(&sample_dataset(&self.gmm, n, &mut rng::stream(stream_seed))?))
    }

    fn train_data(&self, n: usize) -> Result<Dataset> {
        self.sample(n, self.cfg.data.train_seed.wrapping_add(self.seed))
    }

    fn test_data(&self) -> Result<Dataset> {
        self.sample(self.cfg.data.test_size, self.cfg.data.test_seed)
    }

    fn score_spec(&self) -> NetworkSpec {
        let sc = &self.cfg.score;
        NetworkSpec {
            inputs: vec![InputBlock::State { dim: self.dim() }, InputBlock::Time { width: sc.emb_width }],
            hidden_widths: sc.hidden.clone(),
            activation: Activation::Tanh,
            output: OutputHead::Regression { dim: self.dim() },
            init_seed: self.seed,
            zero_init_output: true,
        }
    }

    fn train_score_net(&self) -> Result<(NetScore, LossTrace)> {
        let sc = &self.cfg.score;
        let data = self.train_data(sc.train_size)?;
        train_score(&data, &self.schedule, self.score_spec(), &sc.train.with_seed(self.seed))
    }

    fn score(&self) -> Result<Box<dyn ScoreModel>> {
        Ok(match self.cfg.score.source {
            ScoreSource::Analytic => Box::new(AnalyticScore::new(self.gmm.clone(), self.schedule)),
            ScoreSource::Train => Box::new(self.train_score_net()?.0),
            ScoreSource::Checkpoint => {
                let p = self.cfg.score.checkpoint.as_deref().expect("validated");
                let net = NetScore::from_checkpoint(&Checkpoint::load(p)?)?;
                if *net.schedule() != self.schedule {
                    return Err(Error::Config(format!("{}: score was trained under another schedule", p.display())));
                }
                Box::new(net)
            }
        })
    }

    fn load_classifier(&self, path: &Path) -> Result<NetClassifier> {
        let clf = NetClassifier::from_checkpoint(&Checkpoint::load(path)?)?;
        if *clf.schedule() != self.schedule {
            return Err(Error::Config(format!("{}: classifier was trained under another schedule", path.display())));
        }
        Ok(clf)
    }

    fn train_variant(&self, v: Variant, score: Option<&dyn ScoreModel>) -> Result<(NetClassifier, LossTrace)> {
        let cc = &self.cfg.classifier;
        let data = self.train_data(self.cfg.data.train_size)?;
        let spec = ClassifierKind::Plain.spec(self.dim(), self.gmm.num_classes(), &cc.hidden, 0, self.seed);
        let cfg = cc.train.with_seed(self.seed);
        match v {
            Variant::Baseline => train_classifier(&data, &self.schedule, None, None, spec, &cfg),
            Variant::Diffaug => {
                train_classifier(&data, &self.schedule, score, Some(&self.cfg.diffaug), spec, &cfg)
            }
        }
    }

    fn classifiers(&self, score: &dyn ScoreModel) -> Result<Vec<(Variant, NetClassifier)>> {
        let mut out = Vec::new();
        for &v in &self.cfg.classifier.variants {
            let clf = match &self.cfg.classifier.checkpoint_dir {
                Some(d) => self.load_classifier(&d.join(format!("classifier-{}.json", v.name())))?,
                None => self.train_variant(v, Some(score))?.0,
            };
            out.push((v, clf));
        }
        Ok(out)
    }

    fn train_guidance_net(&self, kind: GuidanceKind, score: &dyn ScoreModel) -> Result<(NetClassifier, LossTrace)> {
        let g = &self.cfg.guidance;
        let data = self.train_data(g.train_size)?;
        let cfg = g.train.with_seed(self.seed);
        let (d, c) = (self.dim(), self.gmm.num_classes());
        match kind {
            GuidanceKind::Noisy => {
                let spec = ClassifierKind::Noisy.spec(d, c, &g.hidden, g.emb_width, self.seed);
                train_noisy_guidance(&data, &self.schedule, spec, &cfg)
            }
            GuidanceKind::DenoisingAugmented => {
                let spec = ClassifierKind::DenoisingAugmented.spec(d, c, &g.hidden, g.emb_width, self.seed);
                train_da_guidance(&data, &self.schedule, score, spec, &cfg)
            }
            GuidanceKind::Bayes => Err(Error::Config("the Bayes guidance classifier is exact, not trained".into())),
        }
    }

    fn guidance_net(&self, kind: GuidanceKind, score: &dyn ScoreModel) -> Result<NetClassifier> {
        match &self.cfg.guidance.checkpoint_dir {
            Some(d) => self.load_classifier(&d.join(format!("guidance-{}.json", kind_name(kind)))),
            None => Ok(self.train_guidance_net(kind, score)?.0),
        }
    }

    fn queries(&self) -> Result<Vec<(Vector, f64)>> {
        let a = &self.cfg.analysis;
        random_queries(
            &self.gmm,
            &self.schedule,
            a.n_points,
            a.t_range[0],
            a.t_range[1],
            a.query_seed.wrapping_add(self.seed),
        )
    }

    fn de_context<'s>(&'s self, score: &'s dyn ScoreModel, ens: &'s EnsembleConfig) -> DeContext<'s> {
        DeContext { schedule: &self.schedule, score, config: ens }
    }
}

fn cmd_train_score(ctx: &Ctx, dir: &mut RunDir) -> Result<()> {
    let sc = &ctx.cfg.score;
    let (model, trace) = ctx.train_score_net()?;
    let err = score_relative_error(
        &model,
        &ctx.gmm,
        &ctx.schedule,
        sc.eval_sigma[0],
        sc.eval_sigma[1],
        sc.eval_points,
        ctx.cfg.data.test_seed,
    )?;
    dir.checkpoint("score.json", &model.to_checkpoint(meta(sc.train.steps, &trace, &ctx.hash)))?;
    dir.csv("loss.csv", &trace.to_csv())?;
    let mut s = Summary::default();
    s.push("score", "relative_error", err);
    s.push("score", "final_loss", trace.last_total().unwrap_or(f64::NAN));
    dir.csv("summary.csv", &s.to_csv())
}

fn cmd_train_classifier(ctx: &Ctx, dir: &mut RunDir) -> Result<()> {
    let score = if ctx.cfg.classifier.variants.contains(&Variant::Diffaug) { Some(ctx.score()?) } else { None };
    let test = ctx.test_data()?;
    let mut s = Summary::default();
    for &v in &ctx.cfg.classifier.variants {
        let (clf, trace) = ctx.train_variant(v, score.as_deref())?;
        dir.checkpoint(
            &format!("classifier-{}.json", v.name()),
            &clf.to_checkpoint(meta(ctx.cfg.classifier.train.steps, &trace, &ctx.hash)),
        )?;
        dir.csv(&format!("loss-{}.csv", v.name()), &trace.to_csv())?;
        let pred = clf.predict(&ClassifierInput::plain(&test.points))?;
        s.push(format!("variant={}", v.name()), "clean_accuracy", accuracy(&pred, &test.labels));
    }
    dir.csv("summary.csv", &s.to_csv())
}

fn cmd_train_guidance(ctx: &Ctx, dir: &mut RunDir) -> Result<()> {
    let score = ctx.score()?;
    let test = ctx.test_data()?;
    let eval = diffused_eval_inputs(&test, &ctx.schedule, score.as_ref(), None, ctx.seed)?;
    let mut rows = String::from("kind,ablation,t_lo,t_hi,accuracy,count\n");
    let mut s = Summary::default();
    for &kind in &ctx.cfg.guidance.kinds {
        if kind == GuidanceKind::Bayes {
            continue;
        }
        let (clf, trace) = ctx.train_guidance_net(kind, score.as_ref())?;
        let name = kind_name(kind);
        dir.checkpoint(
            &format!("guidance-{name}.json"),
            &clf.to_checkpoint(meta(ctx.cfg.guidance.train.steps, &trace, &ctx.hash)),
        )?;
        dir.csv(&format!("loss-{name}.csv"), &trace.to_csv())?;
        let ablations: &[(Ablation, &str)] = if kind == GuidanceKind::DenoisingAugmented {
            &[(Ablation::None, "none"), (Ablation::ZeroNoisy, "zero-noisy"), (Ablation::ZeroDenoised, "zero-denoised")]
        } else {
            &[(Ablation::None, "none")]
        };
        for &(ab, ab_name) in ablations {
            for (lo, hi, acc, count) in eval.accuracy_by_bucket(&clf, ab, ctx.cfg.guidance.time_buckets)? {
                let _ = writeln!(rows, "{name},{ab_name},{lo},{hi},{acc},{count}");
            }
            let pred = eval.predict(&clf, ab)?;
            s.push(format!("kind={name};ablation={ab_name}"), "diffused_accuracy", accuracy(&pred, &eval.labels));
        }
    }
    dir.csv("accuracy.csv", &rows)?;
    dir.csv("summary.csv", &s.to_csv())
}

fn shift_csv(rows: &[(Variant, ShiftRow)]) -> String {
    let mut s = String::from("variant,shift,severity,mode,seed,accuracy\n");
    for (v, r) in rows {
        let _ = writeln!(s, "{},{},{},{},{},{}", v.name(), r.shift.name(), r.severity, r.mode.name(), r.seed, r.accuracy);
    }
    s
}

/// Rows for the shift suite plus a `clean` row per mode, as `(shift name,
/// severity, mode, accuracy)`.
fn shift_table(
    ctx: &Ctx,
    clf: &dyn PointClassifier,
    test: &Dataset,
    modes: &[EvalMode],
    de: Option<&DeContext>,
) -> Result<(Vec<ShiftRow>, Vec<(EvalMode, f64)>)> {
    let suite: Vec<ShiftSpec> = ctx
        .cfg
        .shift
        .kinds
        .iter()
        .flat_map(|&k| ctx.cfg.shift.severities.iter().map(move |&s| ShiftSpec { kind: k, severity: s }))
        .collect();
    let rows = shift_eval(clf, test, &suite, modes, de, ctx.seed)?;
    let mut clean = Vec::new();
    for &m in modes {
        let pred = predict_mode(clf, &test.points, m, de, ctx.seed)?;
        clean.push((m, accuracy(&pred, &test.labels)));
    }
    Ok((rows, clean))
}

fn cmd_eval_shift(ctx: &Ctx, dir: &mut RunDir, modes: &[EvalMode]) -> Result<()> {
    let score = ctx.score()?;
    let classifiers = ctx.classifiers(score.as_ref())?;
    eval_shift_with(ctx, dir, modes, score.as_ref(), &classifiers)
}

fn eval_shift_with(
    ctx: &Ctx,
    dir: &mut RunDir,
    modes: &[EvalMode],
    score: &dyn ScoreModel,
    classifiers: &[(Variant, NetClassifier)],
) -> Result<()> {
    let test = ctx.test_data()?;
    let de = ctx.de_context(score, &ctx.cfg.ensemble);
    let de = modes.contains(&EvalMode::De).then_some(&de);
    let mut all = Vec::new();
    let mut s = Summary::default();
    let mut clean_csv = String::from("variant,mode,accuracy\n");
    for (v, clf) in classifiers {
        let (rows, clean) = shift_table(ctx, clf, &test, modes, de)?;
        for &m in modes {
            let key = format!("variant={};mode={}", v.name(), m.name());
            s.push(&key, "mean_shift_accuracy", mean(rows.iter().filter(|r| r.mode == m).map(|r| r.accuracy)));
        }
        for (m, acc) in clean {
            let _ = writeln!(clean_csv, "{},{},{acc}", v.name(), m.name());
            s.push(format!("variant={};mode={}", v.name(), m.name()), "clean_accuracy", acc);
        }
        for r in &rows {
            s.push(
                format!("variant={};mode={};shift={};severity={}", v.name(), r.mode.name(), r.shift.name(), r.severity),
                "accuracy",
                r.accuracy,
            );
        }
        all.extend(rows.into_iter().map(|r| (*v, r)));
    }
    dir.csv("shift.csv", &shift_csv(&all))?;
    dir.csv("clean.csv", &clean_csv)?;
    dir.csv("summary.csv", &s.to_csv())
}

fn cmd_eval_de(ctx: &Ctx, dir: &mut RunDir) -> Result<()> {
    let score = ctx.score()?;
    let classifiers = ctx.classifiers(score.as_ref())?;
    eval_shift_with(ctx, dir, &[EvalMode::De], score.as_ref(), &classifiers)?;
    if ctx.cfg.shift.de_sweep_t_max.is_empty() {
        return Ok(());
    }
    let test = ctx.test_data()?;
    let mut csv = String::from("variant,t_max,grid_size,mean_shift_accuracy,clean_accuracy\n");
    for (v, clf) in &classifiers {
        for &t_max in &ctx.cfg.shift.de_sweep_t_max {
            let ens = EnsembleConfig { times: EnsembleConfig::grid(50.0 / 999.0, t_max).times, ..ctx.cfg.ensemble.clone() };
            let de = ctx.de_context(score.as_ref(), &ens);
            let (rows, clean) = shift_table(ctx, clf, &test, &[EvalMode::De], Some(&de))?;
            let m = mean(rows.iter().map(|r| r.accuracy));
            let _ = writeln!(csv, "{},{t_max},{},{m},{}", v.name(), ens.times.len(), clean[0].1);
        }
    }
    dir.csv("de-sweep.csv", &csv)
}

fn cmd_entropy_curve(ctx: &Ctx, dir: &mut RunDir) -> Result<()> {
    let score = ctx.score()?;
    let test = ctx.test_data()?;
    let e = &ctx.cfg.entropy;
    let mut csv = String::from("variant,t,mean_entropy\n");
    let mut s = Summary::default();
    for (v, clf) in ctx.classifiers(score.as_ref())? {
        let curve = entropy_curve(&clf, &test, &ctx.schedule, score.as_ref(), &e.t_grid, e.use_x0_scale, ctx.seed)?;
        for &(t, h) in &curve {
            let _ = writeln!(csv, "{},{t},{h}", v.name());
            s.push(format!("variant={};t={t}", v.name()), "mean_entropy", h);
        }
        let clean = mean(entropy_rows(&clf.probs(&test.points)?));
        s.push(format!("variant={}", v.name()), "clean_entropy", clean);
        if curve.len() >= 2 {
            let (ts, hs): (Vec<f64>, Vec<f64>) = curve.iter().copied().unzip();
            if let Ok(rho) = spearman(&ts, &hs) {
                s.push(format!("variant={}", v.name()), "spearman_t_entropy", rho);
            }
        }
    }
    dir.csv("entropy.csv", &csv)?;
    dir.csv("summary.csv", &s.to_csv())
}

fn cmd_certify(ctx: &Ctx, dir: &mut RunDir) -> Result<()> {
    let score = ctx.score()?;
    let test = ctx.test_data()?;
    let c = &ctx.cfg.certify;
    let n = c.n_examples.min(test.len());
    let mut rows_csv = String::from("variant,");
    rows_csv.push_str(crate::evaluation::CERTIFY_CSV_HEADER);
    rows_csv.push('\n');
    let mut curve_csv = String::from("variant,sigma,radius,certified_accuracy\n");
    let mut s = Summary::default();
    for (v, clf) in ctx.classifiers(score.as_ref())? {
        for (si, &sigma) in c.sigmas.iter().enumerate() {
            let mut rows = Vec::with_capacity(n);
            for i in 0..n {
                let x0 = test.points.row(i).transpose();
                let seed = derive_seed(ctx.seed, &[si as u64, i as u64]);
                let r = certify_dds(&clf, &ctx.schedule, score.as_ref(), &x0, sigma, &c.params, seed)?;
                rows.push((i, test.labels[i], r));
            }
            for line in certification_csv(&rows).lines().skip(1) {
                let _ = writeln!(rows_csv, "{},{line}", v.name());
            }
            for (r, acc) in certified_accuracy_curve(&rows, &c.radii) {
                let _ = writeln!(curve_csv, "{},{sigma},{r},{acc}", v.name());
                s.push(format!("variant={};sigma={sigma};radius={r}", v.name()), "certified_accuracy", acc);
            }
        }
    }
    dir.csv("certify.csv", &rows_csv)?;
    dir.csv("curve.csv", &curve_csv)?;
    dir.csv("summary.csv", &s.to_csv())
}

fn cmd_ood(ctx: &Ctx, dir: &mut RunDir) -> Result<()> {
    let o = &ctx.cfg.ood;
    if o.offset.len() != ctx.dim() {
        return Err(Error::Config(format!("ood.offset has {} entries for a {}-d fixture", o.offset.len(), ctx.dim())));
    }
    let score = ctx.score()?;
    let test = ctx.test_data()?;
    let shifted = ctx.gmm.translated(&Vector::from_vec(o.offset.clone()));
    let mut r = rng::substream(ctx.cfg.data.test_seed, &[rng::tag::TEST]);
    let out = Dataset::from_examples(&sample_dataset(&shifted, ctx.cfg.data.test_size, &mut r)?);
    let mut table = String::from("variant,mode,auroc,fpr_at_95_tpr\n");
    let mut s = Summary::default();
    for (v, clf) in ctx.classifiers(score.as_ref())? {
        for &m in &o.modes {
            let (si, so) = ood_scores(&clf, &test.points, &out.points, m, Some((&ctx.schedule, score.as_ref())), ctx.seed)?;
            let res = auroc(&si, &so)?;
            let mn = ood_mode_name(m);
            dir.csv(&format!("scores-{}-{mn}.csv", v.name()), &ood_csv(&si, &so, &res))?;
            let _ = writeln!(table, "{},{mn},{},{}", v.name(), res.auroc, res.fpr_at_95_tpr);
            let key = format!("variant={};mode={mn}", v.name());
            s.push(&key, "auroc", res.auroc);
            s.push(&key, "fpr_at_95_tpr", res.fpr_at_95_tpr);
        }
    }
    dir.csv("ood.csv", &table)?;
    dir.csv("summary.csv", &s.to_csv())
}

fn cmd_verify_theorem1(ctx: &Ctx, dir: &mut RunDir) -> Result<()> {
    let score = ctx.score()?;
    let q = ctx.queries()?;
    let reports = verify_theorem1(&ctx.gmm, &ctx.schedule, score.as_ref(), &q)?;
    let tol = ctx.cfg.analysis.tolerance;
    let mut diffs: Vec<f64> = reports.iter().map(|r| r.max_abs_diff).collect();
    diffs.sort_by(f64::total_cmp);
    let passed = diffs.iter().filter(|&&d| d <= tol).count();
    let median = diffs.get(diffs.len() / 2).copied().unwrap_or(f64::NAN);
    let worst = diffs.last().copied().unwrap_or(f64::NAN);
    dir.json(
        "theorem1.json",
        json!({
            "tolerance": tol,
            "n_points": reports.len(),
            "passed": passed,
            "all_pass": passed == reports.len(),
            "max_abs_diff_median": median,
            "max_abs_diff_worst": worst,
            "points": reports.iter().map(|r| r.to_json_row()).collect::<Vec<Value>>(),
        }),
    )?;
    let mut s = Summary::default();
    s.push("theorem1", "pass_fraction", passed as f64 / reports.len().max(1) as f64);
    s.push("theorem1", "max_abs_diff_median", median);
    s.push("theorem1", "max_abs_diff_worst", worst);
    dir.csv("summary.csv", &s.to_csv())
}

fn cmd_decompose_gradient(ctx: &Ctx, dir: &mut RunDir) -> Result<()> {
    let score = ctx.score()?;
    let clf = ctx.guidance_net(GuidanceKind::DenoisingAugmented, score.as_ref())?;
    let q = ctx.queries()?;
    let d = ctx.dim();
    let vec_cols = |p: &str| (0..d).map(|j| format!("{p}{j}")).collect::<Vec<_>>().join(",");
    let mut csv = format!(
        "t,{},label,{},{},{},{},residual,cos_transported,cos_partial_denoised\n",
        point_cols(d),
        vec_cols("total"),
        vec_cols("partial_noisy"),
        vec_cols("partial_denoised"),
        vec_cols("transported"),
    );
    let (mut res, mut ct, mut cd) = (Vec::new(), Vec::new(), Vec::new());
    for (x, t) in &q {
        let y = ctx.gmm.at_time(&ctx.schedule, *t)?.bayes(x.as_slice()).label;
        let dec = input_gradient_decomposition(&clf, &ctx.schedule, score.as_ref(), x, *t, y)?;
        let (a, b) = eigen_alignment(&dec, &ctx.gmm, &ctx.schedule, x, *t)?;
        let _ = writeln!(
            csv,
            "{t},{},{y},{},{},{},{},{},{a},{b}",
            join(x.iter().copied()),
            join(dec.total.iter().copied()),
            join(dec.partial_noisy.iter().copied()),
            join(dec.partial_denoised.iter().copied()),
            join(dec.transported.iter().copied()),
            dec.residual(),
        );
        res.push(dec.residual());
        ct.push(a);
        cd.push(b);
    }
    dir.csv("decomposition.csv", &csv)?;
    let mut s = Summary::default();
    s.push("decomposition", "max_residual", res.iter().copied().fold(0.0, f64::max));
    s.push("decomposition", "mean_abs_cos_transported", mean(ct));
    s.push("decomposition", "mean_abs_cos_partial_denoised", mean(cd));
    dir.csv("summary.csv", &s.to_csv())
}

fn cmd_svd_jacobian(ctx: &Ctx, dir: &mut RunDir) -> Result<()> {
    let score = ctx.score()?;
    let q = ctx.queries()?;
    let d = ctx.dim();
    let sv_cols = (0..d).map(|j| format!("s{j}")).collect::<Vec<_>>().join(",");
    let mut csv = format!("t,{},{sv_cols},rank,reconstruction_error\n", point_cols(d));
    let (mut top, mut ranks) = (Vec::new(), Vec::new());
    for (x, t) in &q {
        let j = denoiser_jacobian_fd(&ctx.schedule, score.as_ref(), x, *t, default_fd_step(x))?;
        let svd = svd_jacobian(&j)?;
        let rank = svd.numerical_rank(1e-6);
        let rec = (svd.reconstruct() - &j).amax();
        let _ = writeln!(csv, "{t},{},{},{rank},{rec}", join(x.iter().copied()), join(svd.singular_values.iter().copied()));
        top.push(svd.singular_values[0]);
        ranks.push(rank as f64);
    }
    dir.csv("svd.csv", &csv)?;
    let mut s = Summary::default();
    s.push("svd", "mean_top_singular_value", mean(top));
    s.push("svd", "mean_numerical_rank", mean(ranks));
    dir.csv("summary.csv", &s.to_csv())
}

fn samples_csv(points: &Matrix, classes: &[usize], seed: u64, hash: &str) -> String {
    let mut s = format!("class,{},seed,config_hash\n", point_cols(points.ncols()));
    for i in 0..points.nrows() {
        let _ = writeln!(s, "{},{},{seed},{hash}", classes[i], join(points.row(i).iter().copied()));
    }
    s
}

fn cmd_sample(ctx: &Ctx, dir: &mut RunDir) -> Result<()> {
    let score = ctx.score()?;
    let sc = &ctx.cfg.sampling;
    let x = pc_sample_model(&ctx.schedule, score.as_ref(), sc.n_chains, &sc.pc, ctx.seed)?;
    let clean = ctx.gmm.clean();
    let classes: Vec<usize> = (0..x.nrows()).map(|i| clean.bayes(x.row(i).transpose().as_slice()).label).collect();
    dir.csv("samples.csv", &samples_csv(&x, &classes, ctx.seed, &ctx.hash))?;
    let mut target = vec![0.0; ctx.gmm.num_classes()];
    for (k, w) in ctx.gmm.weights().iter().enumerate() {
        target[ctx.gmm.class_of(k)] += w;
    }
    let mut csv = String::from("class,fraction,target\n");
    let mut s = Summary::default();
    for (c, &tw) in target.iter().enumerate() {
        let f = classes.iter().filter(|&&k| k == c).count() as f64 / classes.len().max(1) as f64;
        let _ = writeln!(csv, "{c},{f},{tw}");
        s.push(format!("class={c}"), "fraction", f);
        s.push(format!("class={c}"), "target", tw);
    }
    dir.csv("occupancy.csv", &csv)?;
    dir.csv("summary.csv", &s.to_csv())
}

/// Guided samples for every configured kind: `(kind, per-class samples)`.
fn guided_sets(ctx: &Ctx, score: &dyn ScoreModel) -> Result<Vec<(GuidanceKind, Vec<Matrix>)>> {
    let g = &ctx.cfg.guidance;
    let bayes = BayesGuidance { gmm: ctx.gmm.clone(), schedule: ctx.schedule };
    let mut out = Vec::new();
    for (ki, &kind) in g.kinds.iter().enumerate() {
        let net = match kind {
            GuidanceKind::Bayes => None,
            k => Some(ctx.guidance_net(k, score)?),
        };
        let guide: Box<dyn GuidanceClassifier + '_> = match &net {
            None => Box::new(bayes.clone()),
            Some(n) => Box::new(NetGuidance::new(n, Some(score))?),
        };
        let mut per_class = Vec::new();
        for c in 0..ctx.gmm.num_classes() {
            let gc = GuidanceConfig {
                lambda_s: g.lambda_s,
                scale_placement: g.scale_placement,
                classifier_kind: kind,
                target_class: c,
            };
            let seed = derive_seed(ctx.seed, &[rng::tag::CHAIN, ki as u64, c as u64]);
            per_class.push(guided_sample(&ctx.schedule, score, guide.as_ref(), &gc, &g.pc, g.per_class, seed)?.samples);
        }
        out.push((kind, per_class));
    }
    Ok(out)
}

fn labelled(per_class: &[Matrix]) -> Dataset {
    let mut pts = Vec::new();
    let mut labels = Vec::new();
    for (c, m) in per_class.iter().enumerate() {
        for i in 0..m.nrows() {
            pts.push(m.row(i).transpose());
            labels.push(c);
        }
    }
    Dataset { points: stack_rows(&pts), components: labels.clone(), labels }
}

fn cmd_sample_guided(ctx: &Ctx, dir: &mut RunDir) -> Result<()> {
    let score = ctx.score()?;
    let mut csv = String::from("kind,class,purity\n");
    let mut s = Summary::default();
    for (kind, per_class) in guided_sets(ctx, score.as_ref())? {
        let name = kind_name(kind);
        let set = labelled(&per_class);
        dir.csv(&format!("samples-{name}.csv"), &samples_csv(&set.points, &set.labels, ctx.seed, &ctx.hash))?;
        for (c, m) in per_class.iter().enumerate() {
            let p = purity(&ctx.gmm, m, c)?;
            let _ = writeln!(csv, "{name},{c},{p}");
            s.push(format!("kind={name};class={c}"), "purity", p);
        }
    }
    dir.csv("purity.csv", &csv)?;
    dir.csv("summary.csv", &s.to_csv())
}

fn cmd_prdc(ctx: &Ctx, dir: &mut RunDir) -> Result<()> {
    let score = ctx.score()?;
    let g = &ctx.cfg.guidance;
    let mut real = Vec::new();
    for c in 0..ctx.gmm.num_classes() {
        let cc = ctx.gmm.class_conditional(c)?;
        let mut r = rng::substream(ctx.seed, &[rng::tag::DATA, c as u64]);
        let ex = sample_dataset(&cc, g.per_class, &mut r)?;
        real.push(stack_rows(&ex.into_iter().map(|e| e.x0).collect::<Vec<_>>()));
    }
    let real = labelled(&real);
    let mut csv = String::from("kind,class,precision,recall,density,coverage\n");
    let mut s = Summary::default();
    for (kind, per_class) in guided_sets(ctx, score.as_ref())? {
        let name = kind_name(kind);
        let p = prdc_classwise(&real, &labelled(&per_class), g.prdc_k)?;
        let rows = p.per_class.iter().map(|(c, v)| (c.to_string(), *v)).chain([("average".to_string(), p.average)]);
        for (c, v) in rows {
            let _ = writeln!(csv, "{name},{c},{},{},{},{}", v.precision, v.recall, v.density, v.coverage);
            let key = format!("kind={name};class={c}");
            for (m, x) in ["precision", "recall", "density", "coverage"].iter().zip(v.as_array()) {
                s.push(&key, m, x);
            }
        }
    }
    dir.csv("prdc.csv", &csv)?;
    dir.csv("summary.csv", &s.to_csv())
}
