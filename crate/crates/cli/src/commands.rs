use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use iaraudit_core::attacks::catalog::{score_all, AttackId, AttackName, ScoreTable, Variant};
use iaraudit_core::defense::{sweep, write_sweep_csv, SweepConfig, SweepPoint};
use iaraudit_core::di::{build_features, dataset_inference, default_grid, minimal_p_search, SearchConfig};
use iaraudit_core::extraction::{
    candidate_targets, extract, false_positive_check, select_candidates, write_candidates, write_report_csv,
    LabeledSequence, Model, TokenSimilarity, DEFAULT_PREFIX_CONTINUOUS, DEFAULT_PREFIX_DISCRETE,
};
use iaraudit_core::metrics::{auc, randomized_metric, spearman, tpr_at_fpr, Metric, MetricSummary, RocCurve};
use iaraudit_core::sim::continuous::{fit_continuous, ContinuousToyModel};
use iaraudit_core::sim::discrete::{fit_discrete, DiscreteToyModel};
use iaraudit_core::sim::export::{export_continuous, export_discrete, generator_info, TraceConfig};
use iaraudit_core::sim::{generate_corpus, Corpus, CorpusSample, Role, SimConfig};
use iaraudit_core::trace::{read_trace_all, write_trace, Mode, SampleTrace, Split};
use serde::Serialize;
use serde_json::{json, Value};

use crate::manifest::{Manifest, SeedSource, MANIFEST_FILE};
use crate::*;

/// What a command leaves behind for its manifest.
struct Outcome {
    seed: Option<(u64, SeedSource)>,
    inputs: Vec<PathBuf>,
    outputs: Vec<&'static str>,
}

pub(crate) fn execute(cli: Cli, argv: &[OsString]) -> anyhow::Result<()> {
    if let Command::Replay(args) = &cli.command {
        return replay(args, cli.global.threads);
    }
    let pool = match cli.global.threads {
        Some(0) => return Err(fail(Failure::Usage, "--threads must be >= 1")),
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n).build(),
        None => rayon::ThreadPoolBuilder::new().build(),
    }
    .context("building thread pool")?;
    let start = Instant::now();
    let (name, out, flags) = describe(&cli.command)?;
    fs::create_dir_all(&out)
        .with_context(|| format!("creating {}", out.display()))
        .context(Failure::Input)?;
    let outcome = pool.install(|| dispatch(&cli.command, &out))?;
    let manifest = Manifest {
        command: name.to_string(),
        argv: argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect(),
        flags,
        seed: outcome.seed.map(|s| s.0),
        seed_source: outcome.seed.map(|s| s.1),
        threads: cli.global.threads,
        inputs: outcome.inputs.iter().map(|p| p.display().to_string()).collect(),
        outputs: outcome.outputs.iter().map(|s| s.to_string()).collect(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        duration_secs: start.elapsed().as_secs_f64(),
    };
    manifest.write(&out)
}

fn describe(cmd: &Command) -> anyhow::Result<(&'static str, PathBuf, Value)> {
    fn flags<T: Serialize>(args: &T) -> anyhow::Result<Value> {
        serde_json::to_value(args).context("serializing flags")
    }
    Ok(match cmd {
        Command::Sim(SimCommand::Gen(a)) => ("sim gen", a.out.clone(), flags(a)?),
        Command::Sim(SimCommand::Fit(a)) => ("sim fit", a.out.clone(), flags(a)?),
        Command::Sim(SimCommand::Export(a)) => ("sim export", a.out.clone(), flags(a)?),
        Command::Attack(AttackCommand::Score(a)) => ("attack score", a.out.clone(), flags(a)?),
        Command::Attack(AttackCommand::Eval(a)) => ("attack eval", a.out.clone(), flags(a)?),
        Command::Di(DiCommand::Run(a)) => ("di run", a.out.clone(), flags(a)?),
        Command::Extract(ExtractCommand::Run(a)) => ("extract run", a.out.clone(), flags(a)?),
        Command::Defend(DefendCommand::Sweep(a)) => ("defend sweep", a.out.clone(), flags(a)?),
        Command::Report(a) => ("report", a.out.clone(), flags(a)?),
        Command::Replay(_) => unreachable!("handled before dispatch"),
    })
}

fn dispatch(cmd: &Command, out: &Path) -> anyhow::Result<Outcome> {
    match cmd {
        Command::Sim(SimCommand::Gen(a)) => sim_gen(a, out),
        Command::Sim(SimCommand::Fit(a)) => sim_fit(a, out),
        Command::Sim(SimCommand::Export(a)) => sim_export(a, out),
        Command::Attack(AttackCommand::Score(a)) => attack_score(a, out),
        Command::Attack(AttackCommand::Eval(a)) => attack_eval(a, out),
        Command::Di(DiCommand::Run(a)) => di_run(a, out),
        Command::Extract(ExtractCommand::Run(a)) => extract_run(a, out),
        Command::Defend(DefendCommand::Sweep(a)) => defend_sweep(a, out),
        Command::Report(a) => report(a, out),
        Command::Replay(_) => unreachable!("handled before dispatch"),
    }
}

fn replay(args: &ReplayArgs, threads: Option<usize>) -> anyhow::Result<()> {
    let manifest = Manifest::read(&args.manifest)?;
    let mut argv: Vec<OsString> = vec!["iaraudit".into()];
    argv.extend(
        manifest
            .replay_argv(args.out.as_deref())
            .into_iter()
            .map(OsString::from),
    );
    if let Some(t) = threads.or(manifest.threads) {
        if !manifest
            .argv
            .iter()
            .any(|a| a == "--threads" || a.starts_with("--threads="))
        {
            argv.push("--threads".into());
            argv.push(t.to_string().into());
        }
    }
    let cli = Cli::try_parse_from(&argv).map_err(|e| fail(Failure::Input, format!("manifest arguments: {e}")))?;
    if matches!(cli.command, Command::Replay(_)) {
        return Err(fail(Failure::Input, "a manifest cannot record a replay"));
    }
    execute(cli, &argv)
}

fn resolve_seed(flag: Option<u64>) -> anyhow::Result<(u64, SeedSource)> {
    if let Some(s) = flag {
        return Ok((s, SeedSource::Flag));
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(|s| (s, SeedSource::Env))
            .map_err(|_| fail(Failure::Usage, format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok((DEFAULT_SEED, SeedSource::Default)),
    }
}

fn parse_list<T: std::str::FromStr>(flag: &str, s: &str) -> anyhow::Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.parse::<T>()
                .map_err(|e| fail(Failure::Usage, format!("--{flag}: {p:?}: {e}")))
        })
        .collect()
}

fn select_attacks(sel: &AttackSelection, mode: Mode) -> anyhow::Result<Vec<AttackId>> {
    parse_attacks(&sel.attacks, &sel.k_grid, &sel.eps_grid, mode)
}

fn parse_attacks(spec: &str, k_grid: &str, eps_grid: &str, mode: Mode) -> anyhow::Result<Vec<AttackId>> {
    match spec.trim() {
        "default" => Ok(AttackId::default_set(mode)),
        "grid" => Ok(AttackId::full_grid(
            mode,
            &parse_list::<u32>("k-grid", k_grid)?,
            &parse_list::<f64>("eps-grid", eps_grid)?,
        )),
        list => {
            let ids: Vec<AttackId> = parse_list("attacks", list)?;
            if ids.is_empty() {
                return Err(fail(Failure::Usage, "--attacks is empty"));
            }
            for id in &ids {
                id.check_mode(mode).usage()?;
            }
            Ok(ids)
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    std::io::Write::write_all(&mut w, b"\n")?;
    std::io::Write::flush(&mut w)?;
    Ok(())
}

fn read_corpus(path: &Path) -> anyhow::Result<Corpus> {
    Corpus::read(path).input()
}

enum Loaded {
    Discrete(DiscreteToyModel),
    Continuous(ContinuousToyModel),
}

impl Loaded {
    fn read(path: &Path, mode: Mode) -> anyhow::Result<Self> {
        Ok(match mode {
            Mode::Discrete => Loaded::Discrete(DiscreteToyModel::read(path).input()?),
            Mode::Continuous => Loaded::Continuous(ContinuousToyModel::read(path).input()?),
        })
    }

    fn model(&self) -> Model<'_> {
        match self {
            Loaded::Discrete(m) => Model::Discrete(m),
            Loaded::Continuous(m) => Model::Continuous(m),
        }
    }

    fn config(&self) -> &SimConfig {
        match self {
            Loaded::Discrete(m) => &m.config,
            Loaded::Continuous(m) => &m.config,
        }
    }
}

fn load_pair(corpus: &Path, model: &Path) -> anyhow::Result<(Corpus, Loaded)> {
    let corpus = read_corpus(corpus)?;
    let model = Loaded::read(model, corpus.mode())?;
    let (c, m) = (&corpus.config, model.config());
    if (c.vocab, c.seq_len, c.classes, c.dim) != (m.vocab, m.seq_len, m.classes, m.dim) {
        return Err(fail(Failure::Input, "model and corpus shapes differ"));
    }
    Ok((corpus, model))
}

fn trace_config(t: &TraceArgs, seed: u64) -> TraceConfig {
    TraceConfig {
        timestep: t.timestep,
        mask_ratio: t.mask_ratio,
        repeats: t.repeats,
        include_diff: !t.no_diff,
        include_repeated: !t.no_repeated,
        seed,
    }
}

fn sim_gen(a: &GenArgs, out: &Path) -> anyhow::Result<Outcome> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))
                .context(Failure::Input)?;
            serde_json::from_str::<SimConfig>(&text)
                .map_err(|e| fail(Failure::Input, format!("config {}: {e}", path.display())))?
        }
        None => SimConfig::default(),
    };
    macro_rules! set {
        ($($field:ident),*) => {$(
            if let Some(v) = a.$field {
                cfg.$field = v;
            }
        )*};
    }
    set!(
        vocab,
        seq_len,
        classes,
        members_per_class,
        nonmembers_per_class,
        canaries,
        duplication
    );
    set!(source_concentration, class_sharing, walk_max, dim, s_max, token_noise);
    if let Some(m) = a.mode {
        cfg.mode = match m {
            ModeArg::Discrete => Mode::Discrete,
            ModeArg::Continuous => Mode::Continuous,
        };
    }
    let seed = resolve_seed(a.seed.or(a.config.as_ref().map(|_| cfg.seed)))?;
    cfg.seed = seed.0;
    cfg.validate().usage()?;
    let corpus = generate_corpus(&cfg).usage()?;
    corpus.write(out.join("corpus.json"))?;
    println!("corpus: {} samples ({:?})", corpus.samples.len(), corpus.mode());
    Ok(Outcome {
        seed: Some(seed),
        inputs: a.config.iter().cloned().collect(),
        outputs: vec!["corpus.json"],
    })
}

fn sim_fit(a: &FitArgs, out: &Path) -> anyhow::Result<Outcome> {
    let corpus = read_corpus(&a.corpus)?;
    let mut cfg = corpus.config.clone();
    macro_rules! set {
        ($($field:ident),*) => {$(
            if let Some(v) = a.$field {
                cfg.$field = v;
            }
        )*};
    }
    set!(order, smoothing, p_drop, icl_weight, fit_stride, fit_draws);
    let seed = resolve_seed(a.seed)?;
    cfg.seed = seed.0;
    cfg.validate().usage()?;
    let path = out.join("model.json");
    match corpus.mode() {
        Mode::Discrete => {
            let model = fit_discrete(&corpus, &cfg).numeric()?;
            model.write(&path)?;
            println!("model: discrete, {} count rows", model.rows());
        }
        Mode::Continuous => {
            fit_continuous(&corpus, &cfg).numeric()?.write(&path)?;
            println!("model: continuous");
        }
    }
    Ok(Outcome {
        seed: Some(seed),
        inputs: vec![a.corpus.clone()],
        outputs: vec!["model.json"],
    })
}

fn sim_export(a: &ExportArgs, out: &Path) -> anyhow::Result<Outcome> {
    let (corpus, model) = load_pair(&a.corpus, &a.model)?;
    let seed = resolve_seed(a.seed)?;
    let tc = trace_config(&a.trace, seed.0);
    let eval: Vec<&CorpusSample> = corpus.evaluation().collect();
    let info = generator_info(model.config(), &tc, json!({ "command": "sim export" }));
    let (header, traces) = match &model {
        Loaded::Discrete(m) => export_discrete(m, &eval, &tc, info),
        Loaded::Continuous(m) => export_continuous(m, &eval, &tc, info),
    }
    .usage()?;
    let name = if a.plain { "trace.jsonl" } else { "trace.jsonl.gz" };
    write_trace(out.join(name), &header, &traces)?;
    println!("trace: {} records", traces.len());
    Ok(Outcome {
        seed: Some(seed),
        inputs: vec![a.corpus.clone(), a.model.clone()],
        outputs: vec![name],
    })
}

fn score(trace: &Path, sel: &AttackSelection) -> anyhow::Result<(Mode, Vec<SampleTrace>, ScoreTable)> {
    let (header, samples) = read_trace_all(trace).input()?;
    let attacks = select_attacks(sel, header.mode)?;
    let table = score_all(&samples, header.mode, &attacks);
    for w in &table.warnings {
        eprintln!("warning: {w}");
    }
    Ok((header.mode, samples, table))
}

fn attack_score(a: &ScoreArgs, out: &Path) -> anyhow::Result<Outcome> {
    let (_, samples, table) = score(&a.trace, &a.selection)?;
    table.write_csv(out.join("scores.csv"))?;
    println!(
        "scored {} samples under {} attacks",
        samples.len(),
        table.attacks().len()
    );
    Ok(Outcome {
        seed: None,
        inputs: vec![a.trace.clone()],
        outputs: vec!["scores.csv"],
    })
}

#[derive(Serialize)]
struct AttackMetrics {
    attack: String,
    auc: f64,
    tpr_at_fpr: f64,
    auc_randomized: MetricSummary,
    tpr_at_fpr_randomized: MetricSummary,
}

#[derive(Serialize)]
struct EvalSummary {
    fpr: f64,
    members: usize,
    nonmembers: usize,
    attacks: Vec<AttackMetrics>,
    skipped: Vec<String>,
}

fn attack_eval(a: &EvalArgs, out: &Path) -> anyhow::Result<Outcome> {
    let seed = resolve_seed(a.seed)?;
    if !(a.fpr > 0.0 && a.fpr < 1.0) {
        return Err(fail(Failure::Usage, "--fpr must lie in (0, 1)"));
    }
    let (_, _, table) = score(&a.trace, &a.selection)?;
    table.write_csv(out.join("scores.csv"))?;
    let mut roc = csv_writer(&out.join("roc.csv"))?;
    roc.write_record(["attack", "fpr", "tpr", "threshold"])?;
    let mut metrics = csv_writer(&out.join("metrics.csv"))?;
    metrics.write_record([
        "attack",
        "auc",
        "tpr_at_fpr",
        "auc_mean",
        "auc_std",
        "tpr_at_fpr_mean",
        "tpr_at_fpr_std",
    ])?;
    let mut summary = EvalSummary {
        fpr: a.fpr,
        members: 0,
        nonmembers: 0,
        attacks: Vec::new(),
        skipped: Vec::new(),
    };
    for attack in table.attacks() {
        let key = attack.key();
        let m = table.scores(&attack, Split::Member);
        let n = table.scores(&attack, Split::Nonmember);
        if m.iter().chain(&n).any(|(_, v)| !v.is_finite()) {
            eprintln!("warning: skipping {key}: non-finite scores");
            summary.skipped.push(key);
            continue;
        }
        let mv: Vec<f64> = m.iter().map(|x| x.1).collect();
        let nv: Vec<f64> = n.iter().map(|x| x.1).collect();
        summary.members = mv.len();
        summary.nonmembers = nv.len();
        let curve = RocCurve::new(&mv, &nv).numeric()?;
        for p in &curve.points {
            roc.write_record([
                key.clone(),
                p.fpr.to_string(),
                p.tpr.to_string(),
                p.threshold.to_string(),
            ])?;
        }
        let metric = Metric::TprAtFpr { fpr: a.fpr };
        let row = AttackMetrics {
            auc: auc(&mv, &nv).numeric()?,
            tpr_at_fpr: tpr_at_fpr(&mv, &nv, a.fpr).numeric()?,
            auc_randomized: randomized_metric(&m, &n, Metric::Auc, a.trials, a.subsample, seed.0).numeric()?,
            tpr_at_fpr_randomized: randomized_metric(&m, &n, metric, a.trials, a.subsample, seed.0).numeric()?,
            attack: key,
        };
        metrics.write_record([
            row.attack.clone(),
            row.auc.to_string(),
            row.tpr_at_fpr.to_string(),
            row.auc_randomized.mean.to_string(),
            row.auc_randomized.std.to_string(),
            row.tpr_at_fpr_randomized.mean.to_string(),
            row.tpr_at_fpr_randomized.std.to_string(),
        ])?;
        println!(
            "{:<36} auc {:.4}  tpr@{}% {}",
            row.attack,
            row.auc,
            a.fpr * 100.0,
            row.tpr_at_fpr_randomized
        );
        summary.attacks.push(row);
    }
    roc.flush()?;
    metrics.flush()?;
    write_json(&out.join("metrics.json"), &summary)?;
    Ok(Outcome {
        seed: Some(seed),
        inputs: vec![a.trace.clone()],
        outputs: vec!["scores.csv", "roc.csv", "metrics.csv", "metrics.json"],
    })
}

fn csv_writer(path: &Path) -> anyhow::Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))
}

fn di_run(a: &DiArgs, out: &Path) -> anyhow::Result<Outcome> {
    let seed = resolve_seed(a.seed)?;
    let (_, samples, table) = score(&a.trace, &a.selection)?;
    let ids = |split: Split| -> Vec<String> {
        let mut v: Vec<String> = samples
            .iter()
            .filter(|s| s.split == split)
            .map(|s| s.sample_id.clone())
            .collect();
        v.sort();
        v
    };
    let (suspect, validation) = match a.sets {
        DiSets::Members => (ids(Split::Member), ids(Split::Nonmember)),
        DiSets::NonmemberHalves => {
            let n = ids(Split::Nonmember);
            let (even, odd): (Vec<_>, Vec<_>) = n.into_iter().enumerate().partition(|(i, _)| i % 2 == 0);
            (
                even.into_iter().map(|x| x.1).collect(),
                odd.into_iter().map(|x| x.1).collect(),
            )
        }
    };
    let attacks = table.attacks();
    let features = build_features(&table, &suspect, &validation, &attacks).numeric()?;
    for w in &features.warnings {
        eprintln!("warning: {w}");
    }
    let report = dataset_inference(&features, a.alpha).numeric()?;
    let grid = match &a.di_grid {
        Some(g) => parse_list::<usize>("di-grid", g)?,
        None => default_grid(suspect.len().min(validation.len())),
    };
    let search_cfg = SearchConfig {
        grid,
        trials: a.trials,
        alpha: a.alpha,
        required_rate: a.required_rate,
        seed: seed.0,
    };
    let search = minimal_p_search(&features, &search_cfg).usage()?;
    report.write_scores_csv(out.join("di_scores.csv"))?;
    let mut curve = BufWriter::new(fs::File::create(out.join("di_curve.csv"))?);
    search.write_csv(&mut curve)?;
    std::io::Write::flush(&mut curve)?;
    let summary = json!({
        "sets": a.sets,
        "attacks": report.attacks,
        "test": report.test,
        "rejected": report.test.rejected,
        "p_min": search.p_min,
        "p_min_label": search.p_min_label(),
        "search": search,
        "warnings": report.warnings,
    });
    write_json(&out.join("di.json"), &summary)?;
    println!(
        "rejected={} p={:.3e} p_min={}",
        report.test.rejected,
        report.test.p_value,
        search.p_min_label()
    );
    Ok(Outcome {
        seed: Some(seed),
        inputs: vec![a.trace.clone()],
        outputs: vec!["di.json", "di_scores.csv", "di_curve.csv"],
    })
}

#[derive(Serialize)]
struct SweepCount {
    prefix_length: usize,
    extracted: usize,
    false_positives: usize,
}

fn extract_run(a: &ExtractArgs, out: &Path) -> anyhow::Result<Outcome> {
    let seed = resolve_seed(a.seed)?;
    let (corpus, loaded) = load_pair(&a.corpus, &a.model)?;
    let model = loaded.model();
    let prefix = a.prefix_len.unwrap_or(match corpus.mode() {
        Mode::Discrete => DEFAULT_PREFIX_DISCRETE,
        Mode::Continuous => DEFAULT_PREFIX_CONTINUOUS,
    });
    let mut prefixes: Vec<usize> = parse_list("prefix-sweep", &a.prefix_sweep)?;
    let n = corpus.config.seq_len;
    if let Some(&p) = prefixes.iter().chain([&prefix]).find(|&&p| p >= n) {
        return Err(fail(
            Failure::Usage,
            format!("prefix length {p} must be below the sequence length {n}"),
        ));
    }
    prefixes.sort_unstable();
    prefixes.dedup();
    let training: Vec<LabeledSequence> = corpus.training().map(LabeledSequence::from).collect();
    let validation: Vec<LabeledSequence> = corpus.with_role(Role::Nonmember).map(LabeledSequence::from).collect();
    let candidates = select_candidates(model, &training, a.top_n, seed.0).numeric()?;
    let targets = candidate_targets(&candidates, &training).numeric()?;
    let sim = TokenSimilarity;
    let verdicts = extract(model, &targets, prefix, a.tau, &sim).numeric()?;
    let fp = false_positive_check(model, &validation, prefix, &prefixes, a.tau, &sim).numeric()?;
    let mut sweep_counts = Vec::new();
    for &(p, false_positives) in &fp.sweep {
        let extracted = if p == prefix {
            verdicts.iter().filter(|v| v.memorized).count()
        } else {
            extract(model, &targets, p, a.tau, &sim)
                .numeric()?
                .iter()
                .filter(|v| v.memorized)
                .count()
        };
        sweep_counts.push(SweepCount {
            prefix_length: p,
            extracted,
            false_positives,
        });
    }
    let canaries: Vec<&str> = corpus.with_role(Role::Canary).map(|s| s.sample_id.as_str()).collect();
    let ranked = candidates
        .iter()
        .filter(|c| canaries.contains(&c.sample_id.as_str()))
        .count();
    let extracted: Vec<&str> = verdicts
        .iter()
        .filter(|v| v.memorized)
        .map(|v| v.sample_id.as_str())
        .collect();
    write_candidates(out.join("candidates.json"), &candidates).numeric()?;
    write_report_csv(out.join("extraction.csv"), &candidates, &verdicts).numeric()?;
    let summary = json!({
        "prefix_length": prefix,
        "tau": a.tau,
        "top_n": a.top_n,
        "candidates": candidates.len(),
        "extracted": extracted.len(),
        "extracted_ids": extracted,
        "canaries": canaries.len(),
        "canaries_in_candidates": ranked,
        "canaries_extracted": extracted.iter().filter(|id| canaries.contains(id)).count(),
        "false_positives": fp.flagged.len(),
        "false_positive_ids": fp.flagged.iter().map(|v| v.sample_id.as_str()).collect::<Vec<_>>(),
        "max_safe_prefix": fp.max_safe_prefix,
        "sweep": sweep_counts,
    });
    write_json(&out.join("extraction.json"), &summary)?;
    println!(
        "extracted {} of {} candidates at prefix {prefix}; {} false positives",
        extracted.len(),
        candidates.len(),
        fp.flagged.len()
    );
    Ok(Outcome {
        seed: Some(seed),
        inputs: vec![a.corpus.clone(), a.model.clone()],
        outputs: vec!["candidates.json", "extraction.csv", "extraction.json"],
    })
}

fn rank_correlation(xs: &[f64], ys: &[f64]) -> Option<f64> {
    spearman(xs, ys).ok().filter(|r| r.is_finite())
}

fn defend_sweep(a: &SweepArgs, out: &Path) -> anyhow::Result<Outcome> {
    let seed = resolve_seed(a.seed)?;
    let (corpus, loaded) = load_pair(&a.corpus, &a.model)?;
    let mode = corpus.mode();
    let attack = match &a.attack {
        Some(s) => {
            let id: AttackId = s.parse().map_err(|e| fail(Failure::Usage, format!("--attack: {e}")))?;
            id.check_mode(mode).usage()?;
            id
        }
        None => match mode {
            Mode::Discrete => AttackId::new(AttackName::Loss, Variant::Diff),
            Mode::Continuous => AttackId::new(AttackName::Loss, Variant::LossCond),
        },
    };
    let cfg = SweepConfig {
        sigmas: parse_list("sigma-grid", &a.sigma_grid)?,
        attack,
        di_attacks: parse_attacks(&a.attacks, "", "", mode)?,
        trace: trace_config(&a.trace, seed.0),
        trials: a.trials,
        subsample_fraction: a.subsample,
        di_trials: a.di_trials,
        alpha: a.alpha,
        required_rate: a.required_rate,
        prefix_len: a.prefix_len.unwrap_or(match mode {
            Mode::Discrete => DEFAULT_PREFIX_DISCRETE,
            Mode::Continuous => DEFAULT_PREFIX_CONTINUOUS,
        }),
        tau: a.tau,
        top_n: a.top_n,
        seed: seed.0,
    };
    let points: Vec<SweepPoint> = sweep(loaded.model(), &corpus, &cfg).usage()?;
    write_sweep_csv(out.join("sweep.csv"), &points)?;
    let sigmas: Vec<f64> = points.iter().map(|p| p.sigma).collect();
    let tprs: Vec<f64> = points.iter().map(|p| p.tpr_at_1fpr.mean).collect();
    let utility: Vec<f64> = points.iter().map(|p| p.utility_proxy).collect();
    let summary = json!({
        "attack": cfg.attack.key(),
        "points": points,
        "spearman_sigma_tpr": rank_correlation(&sigmas, &tprs),
        "spearman_sigma_utility": rank_correlation(&sigmas, &utility),
    });
    write_json(&out.join("sweep.json"), &summary)?;
    for p in &points {
        println!(
            "sigma {:<6} tpr {}  di p_min {:<10} extracted {:<3} nll {:.4}",
            p.sigma,
            p.tpr_at_1fpr,
            p.di_p_min.map_or("not found".into(), |v| v.to_string()),
            p.extracted_count,
            p.utility_proxy
        );
    }
    Ok(Outcome {
        seed: Some(seed),
        inputs: vec![a.corpus.clone(), a.model.clone()],
        outputs: vec!["sweep.csv", "sweep.json"],
    })
}

const REPORTED: [&str; 4] = ["metrics.json", "di.json", "extraction.json", "sweep.json"];

fn report(a: &ReportArgs, out: &Path) -> anyhow::Result<Outcome> {
    let mut runs = Vec::new();
    let mut inputs = Vec::new();
    let mut text = String::new();
    for dir in &a.from {
        let manifest_path = dir.join(MANIFEST_FILE);
        let manifest = Manifest::read(&manifest_path)?;
        inputs.push(manifest_path);
        let mut results = BTreeMap::new();
        for name in REPORTED {
            let path = dir.join(name);
            if !path.exists() {
                continue;
            }
            let body = fs::read_to_string(&path)
                .with_context(|| format!("reading {}", path.display()))
                .context(Failure::Input)?;
            let value: Value =
                serde_json::from_str(&body).map_err(|e| fail(Failure::Input, format!("{}: {e}", path.display())))?;
            text.push_str(&summarize(name, &value));
            results.insert(name.trim_end_matches(".json").to_string(), value);
            inputs.push(path);
        }
        runs.push(json!({
            "command": manifest.command,
            "seed": manifest.seed,
            "results": results,
        }));
    }
    write_json(&out.join("report.json"), &json!({ "runs": runs }))?;
    fs::write(out.join("report.txt"), &text)?;
    print!("{text}");
    Ok(Outcome {
        seed: None,
        inputs,
        outputs: vec!["report.json", "report.txt"],
    })
}

fn summarize(name: &str, v: &Value) -> String {
    let mut s = String::new();
    match name {
        "metrics.json" => {
            s.push_str("attack evaluation\n");
            for row in v["attacks"].as_array().into_iter().flatten() {
                s.push_str(&format!(
                    "  {:<36} auc {:.4}  tpr {:.4} ± {:.4}\n",
                    row["attack"].as_str().unwrap_or("?"),
                    row["auc"].as_f64().unwrap_or(f64::NAN),
                    row["tpr_at_fpr_randomized"]["mean"].as_f64().unwrap_or(f64::NAN),
                    row["tpr_at_fpr_randomized"]["std"].as_f64().unwrap_or(f64::NAN),
                ));
            }
        }
        "di.json" => s.push_str(&format!(
            "dataset inference ({}): rejected={} p_min={}\n",
            v["sets"].as_str().unwrap_or("?"),
            v["rejected"],
            v["p_min_label"].as_str().unwrap_or("?"),
        )),
        "extraction.json" => s.push_str(&format!(
            "extraction: {} extracted at prefix {} ({} of {} canaries ranked), {} false positives\n",
            v["extracted"], v["prefix_length"], v["canaries_in_candidates"], v["canaries"], v["false_positives"],
        )),
        "sweep.json" => {
            s.push_str("defense sweep\n");
            for p in v["points"].as_array().into_iter().flatten() {
                s.push_str(&format!(
                    "  sigma {:<6} tpr {:.4}  p_min {:<10} extracted {:<3} nll {:.4}\n",
                    p["sigma"],
                    p["tpr_at_1fpr"]["mean"].as_f64().unwrap_or(f64::NAN),
                    p["di_p_min"].as_u64().map_or("not found".into(), |x| x.to_string()),
                    p["extracted_count"],
                    p["utility_proxy"].as_f64().unwrap_or(f64::NAN),
                ));
            }
        }
        _ => {}
    }
    s
}
