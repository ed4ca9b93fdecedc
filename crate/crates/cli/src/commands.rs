//! Implementations behind the subcommands. Each takes a resolved RunConfig
//! plus its own inputs, performs one pipeline stage, and writes artifacts
//! into a fresh run directory (except synth, which writes the dataset).

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use dpcpl::autodiff::{backward, Tape, Var};
use dpcpl::checkpoint::{
    load_checkpoint, load_prompts, save_checkpoint, save_prompts, Checkpoint, PromptArtifact,
};
use dpcpl::data::{
    generate_synthetic, save_interactions, write_idmaps, InteractionRecord, SplitSpec,
    UserStatistics,
};
use dpcpl::ebm::{encode_user, init_ebm, param_census, EbmParams, ModelDims};
use dpcpl::embedding::prepare_sequence;
use dpcpl::error::{Error, Result};
use dpcpl::eval::{cold_start_subset, evaluate, model_encoder, EvalReport};
use dpcpl::numerics::{grad_check, GradCheckReport};
use dpcpl::optim::Adam;
use dpcpl::pretrain::{example_loss, run_pretraining, Negatives, TrainingExample};
use dpcpl::prompt::{
    compactness_term, generate_prompts, init_prompt, PromptDims, PromptInputs, PromptParams,
};
use dpcpl::rng::substream;
use dpcpl::tensor::Tensor;
use dpcpl::tune::{
    backbone_hash, make_prompt_plan, param_budget, run_tuning, tune_loss, user_prompt_inputs,
    PromptPlan, PromptSource, TrainableSet, TuneConfig,
};
use rand::Rng;

use crate::config::RunConfig;
use crate::pipeline::{
    create_run_dir, echo_config, finalize_dims, load_corpus, split_corpus, write_csv, write_text,
};

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

/// Generate the synthetic corpus and write it (TSV + id maps + config echo)
/// into the data directory.
pub fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    let dir = cfg
        .paths
        .data
        .clone()
        .or_else(|| cfg.paths.out.clone())
        .unwrap_or_else(|| PathBuf::from("data"));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let log = generate_synthetic(&cfg.synth, cfg.seed)?;
    let tsv = dir.join("interactions.tsv");
    save_interactions(&log, &tsv)?;
    write_idmaps(&log, &dir)?;
    write_text(&dir.join("config.toml"), &echo_config(cfg)?)?;
    println!(
        "wrote {} ({} records, {} users, {} items, {} behaviors)",
        tsv.display(),
        log.records().len(),
        log.n_users(),
        log.n_items(),
        log.n_behaviors()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// pretrain
// ---------------------------------------------------------------------------

pub fn cmd_pretrain(cfg: &RunConfig) -> Result<()> {
    let corpus = load_corpus(cfg)?;
    let dims = finalize_dims(cfg, &corpus)?;
    let (spec, report) = split_corpus(cfg, &corpus)?;
    let run_dir = create_run_dir(cfg)?;
    let report_toml = toml::to_string_pretty(&report)
        .map_err(|e| Error::Config(format!("split report serialization failed: {e}")))?;
    write_text(&run_dir.join("split_report.toml"), &report_toml)?;

    let outcome = run_pretraining(&spec.pretrain, &dims, &cfg.pretrain, cfg.seed)?;

    let rows: Vec<Vec<String>> = outcome
        .curve
        .iter()
        .map(|s| vec![s.epoch.to_string(), fmt_f64(s.train_loss), fmt_f64(s.valid_ndcg)])
        .collect();
    write_csv(&run_dir.join("curve.csv"), "epoch,train_loss,valid_ndcg", &rows)?;

    let ckpt = Checkpoint {
        dims: dims.clone(),
        params: outcome.params,
        optimizer: outcome.optimizer,
        epoch: outcome.best_epoch,
        seed: cfg.seed,
        fingerprint: cfg.model_fingerprint(),
    };
    let ckpt_path = run_dir.join("backbone.dpcx");
    save_checkpoint(&ckpt, &ckpt_path)?;

    let best = outcome.curve.get(outcome.best_epoch).map(|s| s.valid_ndcg).unwrap_or(f64::NAN);
    println!(
        "pretrained {} epochs (best epoch {}, valid NDCG {:.6}{}), checkpoint {}",
        outcome.curve.len(),
        outcome.best_epoch,
        best,
        if outcome.stopped_early { ", stopped early" } else { "" },
        ckpt_path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// tune
// ---------------------------------------------------------------------------

pub fn cmd_tune(cfg: &RunConfig, checkpoint: &Path) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let corpus = load_corpus(cfg)?;
    let dims = finalize_dims(cfg, &corpus)?;
    let (spec, _) = split_corpus(cfg, &corpus)?;
    ckpt.check_compatible(&dims, &cfg.model_fingerprint())?;

    let stats_dim = UserStatistics::feature_dim(dims.n_behaviors);
    let pdims = cfg.prompt_dims(stats_dim);
    let run_dir = create_run_dir(cfg)?;

    let outcome = run_tuning(&ckpt.params, &dims, &pdims, &spec, &cfg.tune, cfg.seed)?;

    let rows: Vec<Vec<String>> = outcome
        .curve
        .iter()
        .map(|s| {
            vec![
                s.epoch.to_string(),
                fmt_f64(s.train_pred),
                fmt_f64(s.train_total),
                fmt_f64(s.valid_pred),
            ]
        })
        .collect();
    write_csv(
        &run_dir.join("tune_curve.csv"),
        "epoch,train_pred_loss,train_total_loss,valid_pred_loss",
        &rows,
    )?;

    let budget = param_budget(&ckpt.params, &dims, &outcome.prompts, &cfg.tune);
    write_csv(
        &run_dir.join("budget.csv"),
        "trainable,total,ratio",
        &[vec![
            budget.trainable.to_string(),
            budget.total.to_string(),
            fmt_f64(budget.ratio()),
        ]],
    )?;

    let artifact = PromptArtifact {
        pdims: pdims.clone(),
        source: outcome.prompts,
        backbone_hash: backbone_hash(&outcome.backbone),
    };
    let prompts_path = run_dir.join("prompts.dppx");
    save_prompts(&artifact, &prompts_path)?;

    if cfg.tune.trainable == TrainableSet::Everything {
        let shapes: Vec<_> = outcome.backbone.named().iter().map(|(_, t)| t.shape()).collect();
        let tuned = Checkpoint {
            dims: dims.clone(),
            params: outcome.backbone.clone(),
            optimizer: Adam::new(cfg.tune.adam, &shapes),
            epoch: outcome.best_epoch,
            seed: cfg.seed,
            fingerprint: cfg.model_fingerprint(),
        };
        save_checkpoint(&tuned, &run_dir.join("backbone-tuned.dpcx"))?;
    }

    println!(
        "tuned {} epochs (best epoch {}{}), trainable {} of {} params (ratio {:.4}), prompts {}",
        outcome.curve.len(),
        outcome.best_epoch,
        if outcome.stopped_early { ", stopped early" } else { "" },
        budget.trainable,
        budget.total,
        budget.ratio(),
        prompts_path.display()
    );

    // The tuning stage reports downstream quality right away.
    let plan = make_prompt_plan(&spec, &dims, &cfg.tune);
    let mut run_dims = dims;
    run_dims.no_denoise |= cfg.tune.no_denoise;
    let report = eval_report(
        cfg,
        &run_dims,
        &spec,
        &outcome.backbone,
        Some((&artifact.source, &plan, &pdims)),
    )?;
    write_text(&run_dir.join("eval.csv"), &report.to_csv())?;
    print!("{}", report.to_table());
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, prompts: Option<&Path>) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let corpus = load_corpus(cfg)?;
    let dims = finalize_dims(cfg, &corpus)?;
    let (spec, _) = split_corpus(cfg, &corpus)?;
    ckpt.check_compatible(&dims, &cfg.model_fingerprint())?;

    let mut run_dims = dims;
    run_dims.no_denoise |= cfg.tune.no_denoise;

    let spec = if cfg.eval.cold_start { cold_start_subset(&spec) } else { spec };
    let plan = make_prompt_plan(&spec, &run_dims, &cfg.tune);

    let artifact = match prompts {
        Some(p) => {
            let a = load_prompts(p)?;
            a.check_backbone(&backbone_hash(&ckpt.params))?;
            let expected = UserStatistics::feature_dim(run_dims.n_behaviors);
            if a.pdims.stats_dim != expected {
                return Err(Error::Incompatible(format!(
                    "prompt file expects {} statistics features but this corpus produces {}",
                    a.pdims.stats_dim, expected
                )));
            }
            Some(a)
        }
        None => None,
    };

    let run_dir = create_run_dir(cfg)?;
    let report = match &artifact {
        Some(a) => {
            eval_report(cfg, &run_dims, &spec, &ckpt.params, Some((&a.source, &plan, &a.pdims)))?
        }
        None => eval_report(cfg, &run_dims, &spec, &ckpt.params, None)?,
    };
    write_text(&run_dir.join("eval.csv"), &report.to_csv())?;
    print!("{}", report.to_table());
    Ok(())
}

/// Run the ranking evaluation for a backbone, optionally through prompts.
fn eval_report(
    cfg: &RunConfig,
    dims: &ModelDims,
    spec: &SplitSpec,
    backbone: &EbmParams<Tensor>,
    prompts: Option<(&PromptSource, &PromptPlan, &PromptDims)>,
) -> Result<EvalReport> {
    let mut eval_cfg = cfg.eval.clone();
    eval_cfg.fingerprint = cfg.fingerprint();
    let fallback_pdims = cfg.prompt_dims(UserStatistics::feature_dim(dims.n_behaviors));
    match prompts {
        Some((source, plan, pdims)) => {
            let mut enc = model_encoder(backbone, dims, pdims, Some((source, plan)), spec);
            evaluate(spec, &backbone.item, &mut enc, &eval_cfg, cfg.seed)
        }
        None => {
            let mut enc = model_encoder(backbone, dims, &fallback_pdims, None, spec);
            evaluate(spec, &backbone.item, &mut enc, &eval_cfg, cfg.seed)
        }
    }
}

// ---------------------------------------------------------------------------
// export-prompts
// ---------------------------------------------------------------------------

/// Dump the per-user prompt internals (information vectors, factor banks,
/// pre-projection prompts, injected tokens) as CSVs for inspection.
pub fn cmd_export_prompts(
    cfg: &RunConfig,
    checkpoint: &Path,
    prompts: &Path,
    max_users: usize,
) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let artifact = load_prompts(prompts)?;
    let corpus = load_corpus(cfg)?;
    let dims = finalize_dims(cfg, &corpus)?;
    let (spec, _) = split_corpus(cfg, &corpus)?;
    ckpt.check_compatible(&dims, &cfg.model_fingerprint())?;
    artifact.check_backbone(&backbone_hash(&ckpt.params))?;

    let mut run_dims = dims;
    run_dims.no_denoise |= cfg.tune.no_denoise;
    let plan = make_prompt_plan(&spec, &run_dims, &cfg.tune);
    let run_dir = create_run_dir(cfg)?;

    let mut qu_rows = Vec::new();
    let mut ebank_rows = Vec::new();
    let mut pbank_rows = Vec::new();
    let mut token_rows = Vec::new();

    match &artifact.source {
        PromptSource::Static(toks) => {
            for (layer, t) in toks.iter().enumerate() {
                if let Some(t) = t {
                    push_matrix_rows(&mut token_rows, "-", &[layer.to_string()], t);
                }
            }
        }
        PromptSource::Generated(p) => {
            let users: Vec<usize> = (0..spec.finetune.n_users())
                .filter(|&u| spec.eval_user(u).is_some())
                .take(max_users)
                .collect();
            for user in users {
                let inputs = user_prompt_inputs(&spec, &plan, run_dims.n_behaviors, user);
                let mut tape = Tape::new();
                let bvars = ckpt.params.to_vars(&mut tape);
                let pvars = p.to_vars(&mut tape);
                let bundle = generate_prompts(&mut tape, &pvars, &bvars, &artifact.pdims, &inputs)?;
                let u = user.to_string();
                push_matrix_rows(&mut qu_rows, &u, &[], tape.value(bundle.q_u));
                push_matrix_rows(&mut ebank_rows, &u, &[], tape.value(bundle.e_bank));
                push_matrix_rows(&mut pbank_rows, &u, &[], tape.value(bundle.p_bank));
                for (layer, t) in bundle.tokens.iter().enumerate() {
                    push_matrix_rows(&mut token_rows, &u, &[layer.to_string()], tape.value(*t));
                }
            }
        }
    }

    let d_cols = |n: usize| -> String {
        (0..n).map(|i| format!("v{i}")).collect::<Vec<_>>().join(",")
    };
    let d = artifact.pdims.d;
    if !qu_rows.is_empty() {
        write_csv(&run_dir.join("qu.csv"), &format!("user,row,{}", d_cols(d)), &qu_rows)?;
        write_csv(&run_dir.join("e_bank.csv"), &format!("user,row,{}", d_cols(d)), &ebank_rows)?;
        write_csv(&run_dir.join("p_bank.csv"), &format!("user,row,{}", d_cols(d)), &pbank_rows)?;
    }
    write_csv(
        &run_dir.join("tokens.csv"),
        &format!("user,layer,row,{}", d_cols(d)),
        &token_rows,
    )?;
    println!(
        "exported prompt internals for {} rows of tokens under {}",
        token_rows.len(),
        run_dir.display()
    );
    Ok(())
}

fn push_matrix_rows(out: &mut Vec<Vec<String>>, user: &str, extra: &[String], t: &Tensor) {
    let (rows, cols) = t.shape();
    for r in 0..rows {
        let mut row = Vec::with_capacity(cols + extra.len() + 2);
        row.push(user.to_string());
        row.extend(extra.iter().cloned());
        row.push(r.to_string());
        for c in 0..cols {
            row.push(fmt_f64(t.data()[r * cols + c]));
        }
        out.push(row);
    }
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

pub struct GradcheckOutcome {
    pub table: String,
    pub passed: bool,
    pub n_coords: usize,
    pub elapsed: Duration,
}

/// Check analytic gradients against central differences for every stage of
/// the model at a small configuration: the pretraining loss, the filter
/// encoder, the full prompt-generation path, the tuning loss, and the coding
/// rate on its own.
pub fn run_gradcheck() -> Result<GradcheckOutcome> {
    let start = Instant::now();
    let step = 1e-5;
    let threshold = 1e-4;

    let dims = ModelDims {
        d: 8,
        n_layers: 2,
        k_chunks: 2,
        l_seq: 8,
        l_max: 8,
        n_items: 12,
        n_behaviors: 3,
        ..Default::default()
    };
    let stats_dim = UserStatistics::feature_dim(dims.n_behaviors);
    let pdims = PromptDims {
        d: dims.d,
        n_layers: dims.n_layers,
        n_factors: 2,
        n_tokens: 2,
        attr_vocab: 5,
        attr_slots: 2,
        stats_dim,
    };
    let backbone = init_ebm(&dims, 31)?;
    let mut prompt = init_prompt(&pdims, 32)?;
    // Zero-initialized projections would hide token gradients; fill them.
    for (l, proj) in prompt.projections.iter_mut().enumerate() {
        let mut rng = substream(33 + l as u64, "gradcheck-proj");
        let (r, c) = proj.shape();
        *proj = Tensor::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-0.3..0.3)).collect());
    }

    let records: Vec<InteractionRecord> = [
        (3usize, 0usize),
        (7, 1),
        (1, 2),
        (9, 0),
        (4, 1),
        (11, 2),
        (6, 0),
    ]
    .iter()
    .enumerate()
    .map(|(t, &(item, behavior))| InteractionRecord {
        user: 0,
        item,
        timestamp: t as i64,
        behavior,
    })
    .collect();
    let log = dpcpl::data::InteractionLog::from_parts(
        records.clone(),
        1,
        dims.n_items,
        dims.n_behaviors,
        vec![0],
        (0..dims.n_items as u64).collect(),
    )?;

    let inputs = PromptInputs {
        attrs: vec![1, 3],
        standardized_stats: (0..stats_dim).map(|i| (i as f64) * 0.3 - 0.8).collect(),
        behavior_seqs: vec![vec![3, 7], vec![4], vec![1, 11]],
    };

    let mut sections: Vec<(String, GradCheckReport)> = Vec::new();

    // 1. Pre-training example loss w.r.t. every backbone tensor.
    {
        let named = backbone.named();
        let names: Vec<String> = named.iter().map(|(n, _)| n.clone()).collect();
        let base: Vec<Tensor> = named.iter().map(|(_, t)| (*t).clone()).collect();
        let ex = TrainingExample { user: 0, pos: 5 };
        let negs = Negatives { item: 2, behavior: Some(1) };
        let report = tape_grad_check(
            &names,
            &base,
            &mut |tape, vars| {
                let bv = rebuild(&backbone, vars);
                example_loss(tape, &bv, &dims, &log, ex, negs)
            },
            step,
            threshold,
        )?;
        sections.push(("pretrain_loss".into(), report));
    }

    // 2. The frequency-filter encoder probed by a fixed vector.
    {
        let named = backbone.named();
        let names: Vec<String> = named.iter().map(|(n, _)| n.clone()).collect();
        let base: Vec<Tensor> = named.iter().map(|(_, t)| (*t).clone()).collect();
        let mut rng = substream(35, "gradcheck-probe");
        let probe =
            Tensor::from_vec(1, dims.d, (0..dims.d).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let prep = prepare_sequence(&records, dims.l_seq);
        let report = tape_grad_check(
            &names,
            &base,
            &mut |tape, vars| {
                let bv = rebuild(&backbone, vars);
                let u = encode_user(tape, &bv, &dims, &prep, &[])?;
                let pr = tape.leaf(probe.clone());
                Ok(tape.dot(u, pr))
            },
            step,
            threshold,
        )?;
        sections.push(("encode_user".into(), report));
    }

    // 3. The prompt path: probe-weighted token sum plus the compactness term,
    //    w.r.t. every generator tensor (backbone held constant).
    {
        let named = prompt.named();
        let names: Vec<String> = named.iter().map(|(n, _)| n.clone()).collect();
        let base: Vec<Tensor> = named.iter().map(|(_, t)| (*t).clone()).collect();
        let mut rng = substream(36, "gradcheck-token-probe");
        let probe = Tensor::from_vec(
            pdims.n_tokens,
            pdims.d,
            (0..pdims.n_tokens * pdims.d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let ct_cfg = dpcpl::prompt::CompactnessConfig::default();
        let report = tape_grad_check(
            &names,
            &base,
            &mut |tape, vars| {
                let bv = backbone.to_vars(tape);
                let pv = rebuild_prompt(&prompt, vars);
                let bundle = generate_prompts(tape, &pv, &bv, &pdims, &inputs)?;
                let mut obj = compactness_term(tape, bundle.e_bank, bundle.p_bank, &pdims, &ct_cfg);
                for &t in &bundle.tokens {
                    let pr = tape.leaf(probe.clone());
                    let w = tape.mul(t, pr);
                    let s = tape.sum(w);
                    obj = tape.add(obj, s);
                }
                Ok(obj)
            },
            step,
            threshold,
        )?;
        sections.push(("prompt_path".into(), report));
    }

    // 4. The tuning loss w.r.t. backbone and generator jointly: prompted
    //    encoding, margin, and the weighted compactness term.
    {
        let bn = backbone.named();
        let pn = prompt.named();
        let n_backbone = bn.len();
        let mut names: Vec<String> = bn.iter().map(|(n, _)| n.clone()).collect();
        names.extend(pn.iter().map(|(n, _)| n.clone()));
        let mut base: Vec<Tensor> = bn.iter().map(|(_, t)| (*t).clone()).collect();
        base.extend(pn.iter().map(|(_, t)| (*t).clone()));
        let tune_cfg = TuneConfig::default();
        let prep = prepare_sequence(&records[..5], dims.l_seq);
        // Empty attrs take the default-embedding path, as corpora without
        // profile attributes do.
        let mut tune_inputs = inputs.clone();
        tune_inputs.attrs = Vec::new();
        let report = tape_grad_check(
            &names,
            &base,
            &mut |tape, vars| {
                let bv = rebuild(&backbone, &vars[..n_backbone]);
                let pv = rebuild_prompt(&prompt, &vars[n_backbone..]);
                let bundle = generate_prompts(tape, &pv, &bv, &pdims, &tune_inputs)?;
                let layer_prompts: Vec<Option<Var>> =
                    bundle.tokens.iter().map(|&t| Some(t)).collect();
                let u = encode_user(tape, &bv, &dims, &prep, &layer_prompts)?;
                let e_pos = tape.gather_rows(bv.item, &[records[5].item]);
                let e_neg = tape.gather_rows(bv.item, &[2]);
                Ok(tune_loss(
                    tape,
                    u,
                    e_pos,
                    e_neg,
                    Some((bundle.e_bank, bundle.p_bank)),
                    &pdims,
                    &tune_cfg,
                ))
            },
            step,
            threshold,
        )?;
        sections.push(("tune_loss".into(), report));
    }

    // 5. The coding rate on its own, at a generic matrix.
    {
        let mut rng = substream(37, "gradcheck-rate");
        let m = Tensor::from_vec(4, 8, (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let coef = 8.0 / (4.0 * 1.0);
        let report = tape_grad_check(
            &["coding_rate_input".to_string()],
            std::slice::from_ref(&m),
            &mut |tape, vars| {
                let v = vars[0];
                Ok(tape.coding_rate(v, coef))
            },
            step,
            threshold,
        )?;
        sections.push(("coding_rate".into(), report));
    }

    let mut table = String::new();
    let mut passed = true;
    let mut n_coords = 0;
    for (name, report) in &sections {
        table.push_str(&format!("== {name} ==\n"));
        table.push_str(&report.to_table());
        passed &= report.passed();
        n_coords += report.entries.iter().map(|e| e.n_coords).sum::<usize>();
    }
    Ok(GradcheckOutcome { table, passed, n_coords, elapsed: start.elapsed() })
}

pub fn cmd_gradcheck() -> Result<()> {
    let out = run_gradcheck()?;
    print!("{}", out.table);
    println!(
        "gradcheck={} coords={} elapsed_s={:.2}",
        if out.passed { "pass" } else { "FAIL" },
        out.n_coords,
        out.elapsed.as_secs_f64()
    );
    if out.passed {
        Ok(())
    } else {
        Err(Error::Numeric("gradient check failed; see table above".into()))
    }
}

/// Rebuild a backbone parameter struct over tape variables handed to a
/// finite-difference objective, in the canonical walk order.
fn rebuild(template: &EbmParams<Tensor>, vars: &[Var]) -> EbmParams<Var> {
    let mut i = 0;
    template.map(&mut |_, _| {
        let v = vars[i];
        i += 1;
        v
    })
}

fn rebuild_prompt(template: &PromptParams<Tensor>, vars: &[Var]) -> PromptParams<Var> {
    let mut i = 0;
    template.map(&mut |_, _| {
        let v = vars[i];
        i += 1;
        v
    })
}

/// Analytic gradients from one taped build, checked against central
/// differences of the same build.
fn tape_grad_check(
    names: &[String],
    base: &[Tensor],
    build: &mut dyn FnMut(&mut Tape, &[Var]) -> Result<Var>,
    step: f64,
    threshold: f64,
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = base.iter().map(|t| tape.leaf(t.clone())).collect();
    let obj = build(&mut tape, &vars)?;
    let grads = backward(&tape, obj);
    let analytic: Vec<Tensor> =
        vars.iter().zip(base).map(|(v, t)| grads.get_or_zeros(*v, t.shape())).collect();

    let mut f = |ts: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ts.iter().map(|t| tape.leaf(t.clone())).collect();
        let obj = build(&mut tape, &vars)?;
        Ok(tape.value(obj).data()[0])
    };
    let name_refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
    grad_check(&mut f, &name_refs, base, &analytic, step, threshold)
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

pub struct BenchOutcome {
    /// metric,kernel,l,value rows.
    pub rows: Vec<(String, String, usize, f64)>,
    pub csv: String,
}

/// Parameter census across sequence lengths plus median kernel timings for
/// the frequency filter and the quadratic-attention reference.
pub fn run_bench(quick: bool) -> Result<BenchOutcome> {
    let d = 64;
    let k = 4;
    let census_ls: &[usize] = &[16, 64, 256];
    let timing_ls: &[usize] = if quick { &[64, 128, 256] } else { &[256, 512, 1024] };
    let reps = if quick { 5 } else { 100 };

    let mut rows: Vec<(String, String, usize, f64)> = Vec::new();

    for &l in census_ls {
        let dims = ModelDims {
            d,
            n_layers: 1,
            k_chunks: k,
            l_seq: l,
            l_max: l,
            n_items: 4,
            n_behaviors: 2,
            ..Default::default()
        };
        let params = init_ebm(&dims, 1)?;
        let (census, _) = param_census(&params);
        let efl: usize = census
            .iter()
            .filter(|(name, _)| name.contains(".efl_"))
            .map(|(_, n)| n)
            .sum();
        rows.push(("census_params".into(), "efl".into(), l, efl as f64));
    }

    for &l in timing_ls {
        let dims = ModelDims {
            d,
            n_layers: 1,
            k_chunks: k,
            l_seq: l,
            l_max: l,
            n_items: 4,
            n_behaviors: 2,
            ..Default::default()
        };
        let params = init_ebm(&dims, 2)?;
        let filter = params.layers[0].efl_overall.clone();
        let mut rng = substream(3, "bench-input");
        let x = Tensor::from_vec(l, d, (0..l * d).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let ones = vec![1.0; l];

        let efl_med = time_median(reps, || {
            let mut tape = Tape::new();
            let fv = filter.map_at("efl", &mut |t, _| tape.leaf(t.clone()));
            let xv = tape.leaf(x.clone());
            let y = dpcpl::ebm::efl_forward(&mut tape, &fv, xv, &ones, &ones, false, false);
            std::hint::black_box(tape.value(y).data()[0]);
        });
        rows.push(("median_seconds".into(), "efl".into(), l, efl_med));

        let attn_med = time_median(reps, || {
            let y = dpcpl::attention::attention_reference(&x);
            std::hint::black_box(y.data()[0]);
        });
        rows.push(("median_seconds".into(), "attention".into(), l, attn_med));
    }

    // Doubling ratios between adjacent timed lengths.
    for kernel in ["efl", "attention"] {
        let times: Vec<(usize, f64)> = rows
            .iter()
            .filter(|(m, kn, _, _)| m == "median_seconds" && kn == kernel)
            .map(|&(_, _, l, v)| (l, v))
            .collect();
        for w in times.windows(2) {
            let (l0, t0) = w[0];
            let (l1, t1) = w[1];
            rows.push(("time_ratio".into(), kernel.into(), l1, t1 / t0));
            let _ = l0;
        }
    }

    let mut csv = String::from("metric,kernel,l,value\n");
    for (metric, kernel, l, value) in &rows {
        csv.push_str(&format!("{metric},{kernel},{l},{}\n", fmt_f64(*value)));
    }
    Ok(BenchOutcome { rows, csv })
}

pub fn cmd_bench(cfg: &RunConfig, quick: bool) -> Result<()> {
    let out = run_bench(quick)?;
    let run_dir = create_run_dir(cfg)?;
    write_text(&run_dir.join("bench.csv"), &out.csv)?;
    print!("{}", out.csv);
    Ok(())
}

/// Median wall time of `reps` executions of `f`.
fn time_median(reps: usize, mut f: impl FnMut()) -> f64 {
    let mut times: Vec<f64> = (0..reps.max(1))
        .map(|_| {
            let t0 = Instant::now();
            f();
            t0.elapsed().as_secs_f64()
        })
        .collect();
    times.sort_by(f64::total_cmp);
    times[times.len() / 2]
}

/// Shortest round-trip decimal for CSV cells.
fn fmt_f64(v: f64) -> String {
    format!("{v}")
}
