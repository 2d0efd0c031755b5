use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use isrf_core::data::{sample_dr_candidates, split_leave_one_out, CandidateSet};
use isrf_core::embed::pca_fit;
use isrf_core::eval::{
    case_study, evaluate_state, run_ablations, run_experiment, run_variants, sweep, MetricTable, SrRanking, SweepParam,
};
use isrf_core::genrec::Task;
use isrf_core::graphs::{build_interaction_graph, build_user_relation};
use isrf_core::infer::Recommender;
use isrf_core::manifest::{sha256_json, RunManifest};
use isrf_core::reason::{
    encode_texts, generate_descriptions, load_store, records_of, user_requests, EncoderClient, EntityInput,
    EntityRequest, EntityType, FileEncoder, FileReasoner, GenerateOptions, HttpEncoder, HttpReasoner, ReasonerClient,
    TextField,
};
use isrf_core::synth::generate_planted;
use isrf_core::tensor::{Dtype, EmbeddingMatrix};
use isrf_core::train::{prepare, write_history_csv, ModelState, Prepared, TrainConfig, TrainData};
use isrf_core::{Error, Result};
use serde::Deserialize;
use serde_json::json;

use crate::config::{DataSection, PipelineConfig, SemanticsSection};
use crate::{
    CaseStudyArgs, ClientKind, Command, EmbedArgs, Entities, EvalArgs, Field, GraphArgs, GraphKind, InferArgs,
    PrepareArgs, ReasonArgs, RunArgs, SweepArgs, SynthArgs, TaskArg, TrainArgs, TrainOverrides,
};

pub fn run(cmd: Command, cfg: PipelineConfig) -> (&'static str, Result<()>) {
    match cmd {
        Command::Prepare(a) => ("prepare", prepare_cmd(a, cfg)),
        Command::Reason(a) => ("reason", reason_cmd(a, cfg)),
        Command::Embed(a) => ("embed", embed_cmd(a, cfg)),
        Command::Graph(a) => ("graph", graph_cmd(a, cfg)),
        Command::Train(a) => ("train", train_cmd(a, cfg)),
        Command::Eval(a) => ("eval", eval_cmd(a, cfg)),
        Command::Infer(a) => ("infer", infer_cmd(a, cfg)),
        Command::Ablate(a) => ("ablate", table_cmd("ablate", a, cfg)),
        Command::Variants(a) => ("variants", table_cmd("variants", a, cfg)),
        Command::Sweep(a) => ("sweep", sweep_cmd(a, cfg)),
        Command::CaseStudy(a) => ("case-study", case_study_cmd(a, cfg)),
        Command::Synth(a) => ("synth", synth_cmd(a, cfg)),
    }
}

/// Runs `body` through the manifest in `dir`, skipping it when settings and
/// inputs are unchanged.
fn staged<F>(
    dir: &Path,
    cfg: &PipelineConfig,
    stage: &str,
    settings: serde_json::Value,
    inputs: Vec<PathBuf>,
    body: F,
) -> Result<()>
where
    F: FnOnce() -> Result<Vec<PathBuf>>,
{
    fs::create_dir_all(dir)?;
    let mut manifest = RunManifest::load_or_default(dir)?;
    manifest.config_hash = cfg.raw_hash.clone();
    let settings = sha256_json(&settings)?;
    if !manifest.run_stage(stage, &settings, &inputs, body)? {
        eprintln!("{stage}: inputs unchanged, nothing to do");
    }
    manifest.save(dir)
}

fn parent_dir(p: &Path) -> PathBuf {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn train_config(cfg: &PipelineConfig, o: &TrainOverrides) -> Result<TrainConfig> {
    let mut t = cfg.train.clone();
    if let Some(task) = o.task {
        t.task = task_of(task);
    }
    if let Some(seed) = o.seed {
        t.seed = seed;
    }
    if let Some(n) = o.max_epochs {
        t.max_epochs = n;
    }
    t.validate()?;
    Ok(t)
}

fn task_of(t: TaskArg) -> Task {
    match t {
        TaskArg::Sr => Task::Sr,
        TaskArg::Dr => Task::Dr,
    }
}

fn entity_type(e: Entities) -> EntityType {
    match e {
        Entities::Items => EntityType::Item,
        Entities::Users => EntityType::User,
    }
}

fn text_field(f: Field) -> TextField {
    match f {
        Field::Fused => TextField::Fused,
        Field::Positive => TextField::Positive,
        Field::Negative => TextField::Negative,
    }
}

fn all_data_inputs(cfg: &PipelineConfig) -> Result<Vec<PathBuf>> {
    let mut v = vec![cfg.interactions_path()?];
    v.extend(cfg.semantic_inputs()?);
    Ok(v)
}

fn test_candidates(cfg: &PipelineConfig, task: Task, data: &TrainData) -> Result<Option<Vec<CandidateSet>>> {
    match task {
        Task::Sr if cfg.eval.sr_ranking == SrRanking::Full => Ok(None),
        _ => sample_dr_candidates(&data.dataset, &data.splits, cfg.n_neg(), cfg.data_seed()).map(Some),
    }
}

fn write_table(table: &MetricTable, dir: &Path) -> Result<Vec<PathBuf>> {
    let csv = dir.join("metrics.csv");
    let txt = dir.join("metrics.txt");
    table.write_csv(File::create(&csv)?)?;
    fs::write(&txt, table.to_text())?;
    Ok(vec![csv, txt])
}

/// Loads a checkpoint and rebuilds the derived inputs it was trained on.
fn load_trained(cfg: &PipelineConfig, checkpoint: &Path) -> Result<(ModelState, Prepared, TrainData)> {
    let state = ModelState::load(checkpoint)?;
    let data = cfg.train_data()?;
    let prep = prepare(&state.config, &data)?;
    if prep.frozen.digest() != state.frozen.digest() {
        return Err(Error::InvalidArgument(
            "checkpoint was trained on different data or semantics than the config points to".into(),
        ));
    }
    Ok((state, prep, data))
}

fn prepare_cmd(a: PrepareArgs, mut cfg: PipelineConfig) -> Result<()> {
    if let Some(p) = a.interactions {
        cfg.data.interactions = Some(std::path::absolute(p)?);
    }
    if a.n_neg.is_some() {
        cfg.data.n_neg = a.n_neg;
    }
    if a.seed.is_some() {
        cfg.data.seed = a.seed;
    }
    let settings = json!({"n_neg": cfg.n_neg(), "seed": cfg.data_seed()});
    let inputs = vec![cfg.interactions_path()?];
    let out = a.out.clone();
    staged(&a.out, &cfg, "prepare", settings, inputs, || {
        let (ds, report) = cfg.load_dataset()?;
        let splits = split_leave_one_out(&ds)?;
        let candidates = sample_dr_candidates(&ds, &splits, cfg.n_neg(), cfg.data_seed())?;
        let splits_path = out.join("splits.jsonl");
        let cand_path = out.join("candidates.jsonl");
        let rejected_path = out.join("rejected_users.txt");
        let mut w = BufWriter::new(File::create(&splits_path)?);
        splits.write_jsonl(&mut w)?;
        w.flush()?;
        let mut w = BufWriter::new(File::create(&cand_path)?);
        CandidateSet::write_jsonl(&candidates, &mut w)?;
        w.flush()?;
        let mut rejected = report.rejected_users.join("\n");
        if !rejected.is_empty() {
            rejected.push('\n');
        }
        fs::write(&rejected_path, rejected)?;
        eprintln!(
            "prepare: {} users, {} items, {} interactions, {} users dropped",
            ds.n_users(),
            ds.n_items(),
            ds.n_interactions(),
            report.rejected_users.len()
        );
        Ok(vec![splits_path, cand_path, rejected_path])
    })
}

#[derive(Deserialize)]
struct AttributeLine {
    index: usize,
    attributes: Vec<(String, String)>,
}

fn load_attributes(path: &Path) -> Result<Vec<EntityRequest>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let a: AttributeLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(EntityRequest {
            entity_type: EntityType::Item,
            index: a.index,
            input: EntityInput::Item {
                attributes: a.attributes,
            },
        });
    }
    Ok(out)
}

fn reason_cmd(a: ReasonArgs, cfg: PipelineConfig) -> Result<()> {
    let mut inputs = Vec::new();
    let requests = match a.entities {
        Entities::Items => {
            let p = a.attributes.clone().ok_or(Error::MissingContext {
                stage: "reason",
                what: "--attributes for item prompts",
            })?;
            inputs.push(p.clone());
            load_attributes(&p)?
        }
        Entities::Users => {
            let p = a.item_store.clone().ok_or(Error::MissingContext {
                stage: "reason",
                what: "--item-store for user prompts",
            })?;
            inputs.push(p.clone());
            inputs.push(cfg.interactions_path()?);
            let (ds, _) = cfg.load_dataset()?;
            let splits = split_leave_one_out(&ds)?;
            let train: Vec<Vec<usize>> = splits.users.iter().map(|s| s.train.clone()).collect();
            user_requests(&train, &load_store(&p)?, cfg.reason.sample, cfg.reason.seed)?
        }
    };
    let client: Box<dyn ReasonerClient> = match a.client {
        ClientKind::File => {
            let p = a.responses.clone().ok_or(Error::MissingContext {
                stage: "reason",
                what: "--responses for the file client",
            })?;
            inputs.push(p.clone());
            Box::new(FileReasoner::load(p)?)
        }
        ClientKind::Http => Box::new(HttpReasoner::from_env(&cfg.reason.model)?),
    };
    let opts = GenerateOptions {
        max_in_flight: cfg.reason.max_in_flight,
        ..GenerateOptions::default()
    };
    let report = generate_descriptions(client.as_ref(), &requests, &a.store, &opts)?;
    let failed = report.records.iter().filter(|r| r.error.is_some()).count();
    eprintln!(
        "reason: {} generated, {} already complete, {} failed, {} missing responses",
        report.generated,
        report.resumed,
        failed,
        report.gaps.len()
    );
    let settings = json!({
        "entities": format!("{:?}", a.entities),
        "client": format!("{:?}", a.client),
        "reason": cfg.reason,
    });
    let store = a.store.clone();
    staged(&parent_dir(&a.store), &cfg, "reason", settings, inputs, || {
        Ok(vec![store])
    })?;
    if let Some((entity, stage)) = report.gaps.into_iter().next() {
        return Err(Error::Gap { entity, stage });
    }
    Ok(())
}

fn embed_cmd(a: EmbedArgs, cfg: PipelineConfig) -> Result<()> {
    let mut inputs = vec![a.store.clone()];
    if let Some(m) = &a.matrix {
        inputs.push(m.clone());
    }
    let settings = json!({
        "entities": format!("{:?}", a.entities),
        "client": format!("{:?}", a.client),
        "field": format!("{:?}", a.field),
        "dim": a.dim,
        "pca": a.pca,
        "model": cfg.reason.model,
    });
    staged(&parent_dir(&a.out), &cfg, "embed", settings, inputs, || {
        let client: Box<dyn EncoderClient> = match a.client {
            ClientKind::File => Box::new(FileEncoder::load(a.matrix.as_ref().ok_or(Error::MissingContext {
                stage: "embed",
                what: "--matrix for the file client",
            })?)?),
            ClientKind::Http => Box::new(HttpEncoder::from_env(
                &cfg.reason.model,
                a.dim.ok_or(Error::MissingContext {
                    stage: "embed",
                    what: "--dim for the http client",
                })?,
            )?),
        };
        let records = records_of(&load_store(&a.store)?, entity_type(a.entities));
        let m = encode_texts(client.as_ref(), &records, text_field(a.field))?;
        m.save(&a.out, Dtype::F64)?;
        let mut outputs = vec![a.out.clone()];
        if let Some(d_m) = a.pca {
            let model = pca_fit(&m, d_m)?;
            let pca_path = with_suffix(&a.out, ".pca");
            let reduced_path = with_suffix(&a.out, ".reduced");
            model.save(&pca_path)?;
            model.transform(&m)?.save(&reduced_path, Dtype::F64)?;
            outputs.extend([pca_path, reduced_path]);
        }
        Ok(outputs)
    })
}

fn graph_cmd(a: GraphArgs, cfg: PipelineConfig) -> Result<()> {
    let k = a.k.unwrap_or(cfg.train.k);
    let mut inputs = vec![cfg.interactions_path()?];
    if a.kind == GraphKind::Relation {
        inputs = cfg.semantic_inputs()?;
    }
    let settings = json!({
        "kind": format!("{:?}", a.kind),
        "k": k,
        "symmetrize": format!("{:?}", cfg.train.relation_symmetrize),
    });
    staged(&parent_dir(&a.out), &cfg, "graph", settings, inputs, || {
        match a.kind {
            GraphKind::Interaction => {
                let (ds, _) = cfg.load_dataset()?;
                let splits = split_leave_one_out(&ds)?;
                let g = build_interaction_graph(&ds, &splits)?;
                eprintln!("graph: {} nodes, {} edges", g.degree.len(), g.nnz());
                g.save(&a.out)?;
            }
            GraphKind::Relation => {
                let users = cfg.semantics.users.as_deref().ok_or(Error::MissingContext {
                    stage: "graph",
                    what: "semantics.users",
                })?;
                let s_u = EmbeddingMatrix::load(cfg.resolve(users))?;
                let (g, report) = build_user_relation(&s_u.values, k, cfg.train.relation_symmetrize)?;
                if !report.zero_norm_rows.is_empty() {
                    eprintln!("graph: {} users have zero-norm embeddings", report.zero_norm_rows.len());
                }
                eprintln!("graph: {} users, {} edges", g.degree.len(), g.nnz());
                g.save(&a.out)?;
            }
        }
        Ok(vec![a.out.clone()])
    })
}

fn train_cmd(a: TrainArgs, cfg: PipelineConfig) -> Result<()> {
    let tc = train_config(&cfg, &a.overrides)?;
    let settings =
        json!({"train": tc, "n_neg": cfg.n_neg(), "data_seed": cfg.data_seed(), "sr_ranking": cfg.eval.sr_ranking});
    let inputs = all_data_inputs(&cfg)?;
    staged(&a.out, &cfg, "train", settings, inputs, || {
        let data = cfg.experiment_data(tc.task)?;
        let (row, _, fitted) = run_experiment(&tc, &data, tc.variant.label())?;
        let ckpt = a.out.join("checkpoint.bin");
        let hist = a.out.join("history.csv");
        fitted.best.save(&ckpt)?;
        write_history_csv(&fitted.history, File::create(&hist)?)?;
        eprintln!(
            "train: best epoch {} of {}{}, test H@10 {:.4}",
            fitted.best_epoch,
            fitted.history.len(),
            if fitted.stopped_early { " (early stop)" } else { "" },
            row.h10
        );
        let mut table = MetricTable::default();
        table.push(row);
        let mut outputs = vec![ckpt, hist];
        outputs.extend(write_table(&table, &a.out)?);
        Ok(outputs)
    })
}

fn eval_cmd(a: EvalArgs, cfg: PipelineConfig) -> Result<()> {
    let beam = a.beam.unwrap_or_else(|| cfg.beam());
    let mut inputs = vec![a.checkpoint.clone()];
    inputs.extend(all_data_inputs(&cfg)?);
    let settings =
        json!({"beam": beam, "n_neg": cfg.n_neg(), "data_seed": cfg.data_seed(), "sr_ranking": cfg.eval.sr_ranking});
    staged(&a.out, &cfg, "eval", settings, inputs, || {
        let (state, prep, data) = load_trained(&cfg, &a.checkpoint)?;
        let sets = test_candidates(&cfg, prep.task, &data)?;
        let row = evaluate_state(
            &state,
            &prep,
            &data.splits,
            sets.as_deref(),
            beam,
            state.config.variant.label(),
        )?;
        let mut table = MetricTable::default();
        table.push(row);
        print!("{}", table.to_text());
        write_table(&table, &a.out)
    })
}

fn infer_cmd(a: InferArgs, cfg: PipelineConfig) -> Result<()> {
    let (state, prep, data) = load_trained(&cfg, &a.checkpoint)?;
    if let Some(t) = a.task {
        if task_of(t) != prep.task {
            return Err(Error::InvalidArgument(format!(
                "checkpoint was trained for {}",
                prep.task
            )));
        }
    }
    let beam = a.beam.unwrap_or_else(|| cfg.beam()).max(a.top);
    let sets = test_candidates(&cfg, prep.task, &data)?;
    let users: Vec<usize> = match a.user {
        Some(u) if u >= data.dataset.n_users() => {
            return Err(Error::IndexOutOfRange {
                index: u,
                len: data.dataset.n_users(),
            })
        }
        Some(u) => vec![u],
        None => (0..data.dataset.n_users()).collect(),
    };
    let rec = Recommender::new(&state, &prep)?;
    let mut out: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    };
    for u in users {
        let history = data.splits.users[u].history_for_test();
        let candidates = sets.as_ref().map(|s| s[u].all_items());
        let items: Vec<serde_json::Value> = rec
            .recommend(u, &history, candidates.as_deref(), beam)?
            .into_iter()
            .take(a.top)
            .map(|(item, log_prob)| json!({"item": item, "log_prob": log_prob}))
            .collect();
        writeln!(out, "{}", json!({"user": u, "items": items}))?;
    }
    out.flush()?;
    Ok(())
}

fn table_cmd(stage: &'static str, a: RunArgs, cfg: PipelineConfig) -> Result<()> {
    let tc = train_config(&cfg, &a.overrides)?;
    let settings =
        json!({"train": tc, "n_neg": cfg.n_neg(), "data_seed": cfg.data_seed(), "sr_ranking": cfg.eval.sr_ranking});
    let inputs = all_data_inputs(&cfg)?;
    staged(&a.out, &cfg, stage, settings, inputs, || {
        let data = cfg.experiment_data(tc.task)?;
        let table = if stage == "ablate" {
            run_ablations(&tc, &data)?
        } else {
            run_variants(&tc, &data)?
        };
        print!("{}", table.to_text());
        write_table(&table, &a.out)
    })
}

fn sweep_cmd(a: SweepArgs, cfg: PipelineConfig) -> Result<()> {
    let param: SweepParam = a.param.parse()?;
    if a.values.is_empty() {
        return Err(Error::Empty("sweep values"));
    }
    let tc = train_config(&cfg, &a.overrides)?;
    let settings = json!({
        "train": tc,
        "param": a.param,
        "values": a.values,
        "n_neg": cfg.n_neg(),
        "data_seed": cfg.data_seed(),
        "sr_ranking": cfg.eval.sr_ranking,
    });
    let inputs = all_data_inputs(&cfg)?;
    staged(&a.out, &cfg, "sweep", settings, inputs, || {
        let data = cfg.experiment_data(tc.task)?;
        let table = sweep(param, &a.values, &tc, &data)?;
        print!("{}", table.to_text());
        write_table(&table, &a.out)
    })
}

fn case_study_cmd(a: CaseStudyArgs, cfg: PipelineConfig) -> Result<()> {
    let mut inputs = vec![a.checkpoint.clone()];
    inputs.extend(all_data_inputs(&cfg)?);
    if let Some(c) = &cfg.semantics.categories {
        inputs.push(cfg.resolve(c));
    }
    let settings = json!({"user": a.user, "top_m": a.top_m, "n_neg": cfg.n_neg(), "data_seed": cfg.data_seed(), "sr_ranking": cfg.eval.sr_ranking});
    staged(&a.out, &cfg, "case-study", settings, inputs, || {
        let (state, prep, data) = load_trained(&cfg, &a.checkpoint)?;
        let categories = cfg.categories(data.dataset.n_items())?;
        let sets = test_candidates(&cfg, prep.task, &data)?;
        let candidates = match &sets {
            Some(s) => Some(
                s.get(a.user)
                    .ok_or(Error::IndexOutOfRange {
                        index: a.user,
                        len: s.len(),
                    })?
                    .all_items(),
            ),
            None => None,
        };
        let report = case_study(&state, &prep, a.user, a.top_m, &categories, candidates.as_deref())?;
        let path = a.out.join("case_study.json");
        fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")?;
        Ok(vec![path])
    })
}

/// Small model settings for the config written next to synthetic data.
fn toy_train_config() -> TrainConfig {
    TrainConfig {
        k: 5,
        d_m: 8,
        d: 16,
        n_prompts: 2,
        max_epochs: 3,
        eval_beam: 10,
        n_neg: 20,
        ..TrainConfig::default()
    }
}

fn synth_cmd(a: SynthArgs, cfg: PipelineConfig) -> Result<()> {
    let mut sc = cfg.synth.clone();
    if let Some(s) = a.seed {
        sc.seed = s;
    }
    if let Some(n) = a.noise {
        sc.noise = n;
    }
    if let Some(n) = a.n_users {
        sc.n_users = n;
    }
    if let Some(n) = a.n_items {
        sc.n_items = n;
    }
    sc.validate()?;
    let train = if cfg.raw_hash.is_some() {
        cfg.train.clone()
    } else {
        toy_train_config()
    };
    let settings = json!({"synth": sc, "train": train});
    staged(&a.out, &cfg, "synth", settings, Vec::new(), || {
        let planted = generate_planted(&sc)?;
        planted.write(&a.out)?;
        let written = PipelineConfig {
            data: DataSection {
                interactions: Some("interactions.txt".into()),
                n_neg: Some(train.n_neg),
                seed: Some(sc.seed),
            },
            semantics: SemanticsSection {
                users: Some("users.emb".into()),
                users_pos: Some("users_pos.emb".into()),
                users_neg: Some("users_neg.emb".into()),
                items: Some("items.emb".into()),
                items_pos: Some("items_pos.emb".into()),
                items_neg: Some("items_neg.emb".into()),
                categories: Some("categories.txt".into()),
            },
            reason: cfg.reason.clone(),
            train: train.clone(),
            eval: cfg.eval.clone(),
            synth: sc.clone(),
            base_dir: PathBuf::new(),
            raw_hash: None,
        };
        let config_path = a.out.join("config.json");
        fs::write(&config_path, serde_json::to_string_pretty(&written)? + "\n")?;
        let mut outputs: Vec<PathBuf> = [
            "interactions.txt",
            "users.emb",
            "users_pos.emb",
            "users_neg.emb",
            "items.emb",
            "items_pos.emb",
            "items_neg.emb",
            "categories.txt",
            "groups.json",
        ]
        .iter()
        .map(|f| a.out.join(f))
        .collect();
        outputs.push(config_path);
        eprintln!(
            "synth: {} users, {} items, {} interactions",
            planted.dataset.n_users(),
            planted.dataset.n_items(),
            planted.dataset.n_interactions()
        );
        Ok(outputs)
    })
}
