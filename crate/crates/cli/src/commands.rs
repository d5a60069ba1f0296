use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::info;

use cyphertalk::attacks::AttackRecord;
use cyphertalk::checks::{run_all, CheckResult};
use cyphertalk::data::{AdaptDataset, SyntheticTask};
use cyphertalk::experiment::{attribute_probe, inversion_records, pretrain_masked, AttributeData};
use cyphertalk::keys::KeyPair;
use cyphertalk::model::{accuracy, LanguageModel, Mode, TrainSchedule};
use cyphertalk::netservice::{serve, ClientSession, ServerConfig};
use cyphertalk::numeric::Rng;
use cyphertalk::privacy::{
    deploy, private_infer, private_tune, ClientKeys, Prediction, TuneConfig,
};
use cyphertalk::recovery::metrics_log;
use cyphertalk::shaking::implant;

use crate::config::Config;
use crate::exit::{CliError, ErrorClass};
use crate::rundir::RunDir;

/// Where tuning and inference run: a local checkpoint or a remote server.
#[derive(Debug, Clone)]
pub enum Target {
    Local(PathBuf),
    Remote(String),
}

fn load_model(run: &mut RunDir, role: &str, path: &Path) -> Result<LanguageModel> {
    run.input(role, path)?;
    LanguageModel::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn load_key(run: &mut RunDir, path: &Path) -> Result<KeyPair> {
    run.input("key", path)?;
    KeyPair::load(path).with_context(|| format!("loading key {}", path.display()))
}

fn load_task_data(run: &mut RunDir, role: &str, path: &Path) -> Result<AdaptDataset> {
    run.input(role, path)?;
    AdaptDataset::load(path, Mode::Task).with_context(|| format!("reading {}", path.display()))
}

fn client_keys(cfg: &Config, kp: &KeyPair, classes: usize) -> ClientKeys {
    ClientKeys::from_keypair(kp, cfg.hs_once, classes, cfg.shake_labels)
}

fn join_ids(ids: &[u32]) -> String {
    ids.iter().map(u32::to_string).collect::<Vec<_>>().join(" ")
}

fn attributes_text(attrs: &[u32]) -> String {
    attrs.iter().map(|a| format!("{a}\n")).collect()
}

fn read_attributes(run: &mut RunDir, path: &Path) -> Result<Vec<u32>> {
    run.input("attributes", path)?;
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim().parse().map_err(|e| {
                anyhow::Error::new(cyphertalk::error::Error::Input {
                    position: i + 1,
                    reason: format!("bad attribute {l:?}: {e}"),
                })
                .context(format!("reading {}", path.display()))
            })
        })
        .collect()
}

pub fn synth(cfg: &Config, out: &Path, seed: u64) -> Result<()> {
    let data_cfg = cfg.synthetic()?;
    let mut run = RunDir::create(out, "synth", cfg, Some(seed))?;
    let task = SyntheticTask::generate(&data_cfg, seed)?;
    run.write("train", "train.tsv", task.train.to_text().as_bytes())?;
    run.write("test", "test.tsv", task.test.to_text().as_bytes())?;
    run.write(
        "train_attributes",
        "train.attr",
        attributes_text(&task.train_attributes).as_bytes(),
    )?;
    run.write(
        "test_attributes",
        "test.attr",
        attributes_text(&task.test_attributes).as_bytes(),
    )?;
    run.metric("train_examples", task.train.len() as f64);
    run.metric("test_examples", task.test.len() as f64);
    let dir = run.finish()?;
    println!(
        "wrote {} train / {} test examples to {}",
        task.train.len(),
        task.test.len(),
        dir.display()
    );
    Ok(())
}

pub fn pretrain(cfg: &Config, out: &Path, seed: u64, data: &Path) -> Result<()> {
    let mut run = RunDir::create(out, "pretrain", cfg, Some(seed))?;
    let data = load_task_data(&mut run, "data", data)?;
    let mut m = LanguageModel::init(cfg.dims, cfg.tied, &mut Rng::stream(seed, "model-init"))?;
    let schedule = TrainSchedule {
        seed,
        ..cfg.pretrain
    };
    let losses = pretrain_masked(&mut m, &data, &schedule, cfg.mask_rate).context("pretraining")?;
    let mut log = String::from("epoch\tloss\n");
    for (e, l) in losses.iter().enumerate() {
        let _ = writeln!(log, "{e}\t{l:.6}");
    }
    run.write("metrics", "pretrain.tsv", log.as_bytes())?;
    run.write("model", "model.ckpt", &m.to_bytes())?;
    if let Some(l) = losses.last() {
        run.metric("final_loss", *l);
    }
    let dir = run.finish()?;
    println!(
        "model {} written to {}",
        m.hash(),
        dir.join("model.ckpt").display()
    );
    Ok(())
}

pub fn keygen(cfg: &Config, out: &Path, seed: u64) -> Result<()> {
    let mut run = RunDir::create(out, "keygen", cfg, Some(seed))?;
    let kp = cfg.generate_key(seed)?;
    run.write("key", "key.ctk", &kp.to_bytes()?)?;
    let ops: Vec<&str> = kp.rounds.iter().map(|r| r.op().name()).collect();
    run.note("rounds", ops.join(","));
    run.metric("rounds", kp.rounds.len() as f64);
    let dir = run.finish()?;
    println!(
        "key with {} vertical round(s) [{}] written to {}",
        ops.len(),
        ops.join(", "),
        dir.join("key.ctk").display()
    );
    Ok(())
}

pub struct ImplantArgs<'a> {
    pub model: &'a Path,
    pub key: &'a Path,
    pub data: Option<&'a Path>,
    pub heldout: Option<&'a Path>,
}

pub fn implant_cmd(cfg: &Config, out: &Path, seed: u64, args: &ImplantArgs) -> Result<()> {
    let mut run = RunDir::create(out, "implant", cfg, Some(seed))?;
    let m = load_model(&mut run, "model", args.model)?;
    let kp = load_key(&mut run, args.key)?;
    let data = match args.data {
        Some(p) => load_task_data(&mut run, "data", p)?,
        None if kp.rounds.is_empty() => AdaptDataset::default(),
        None => {
            return Err(
                CliError::usage("--data is required when the key has vertical rounds").into(),
            )
        }
    };
    let heldout = args
        .heldout
        .map(|p| load_task_data(&mut run, "heldout", p))
        .transpose()?;
    let out_model =
        implant(&m, &kp, &data, heldout.as_ref(), &cfg.implant(seed)).context("implanting key")?;
    let keys = client_keys(cfg, &kp, m.dims().classes);
    let deployed = deploy(&out_model.model, &keys.labels)?;

    let records = out_model.rounds.iter().flat_map(|r| {
        r.awareness
            .iter()
            .chain(&r.functional)
            .map(move |e| (r.round, e))
    });
    run.write("metrics", "recovery.tsv", metrics_log(records).as_bytes())?;
    run.write("model", "model.ckpt", &deployed.to_bytes())?;
    run.metric("epochs_trained", out_model.epochs_trained() as f64);
    if let Some(h) = &heldout {
        if let Some(labels) = h.labels() {
            let preds = private_infer(&deployed, &h.inputs(), &keys, Mode::Task)?;
            let acc = accuracy(&labels_of(&preds), &labels);
            run.metric("heldout_accuracy", acc);
            println!("held-out accuracy through the keys: {acc:.4}");
        }
    }
    let dir = run.finish()?;
    println!(
        "implanted model {} written to {}",
        deployed.hash(),
        dir.join("model.ckpt").display()
    );
    Ok(())
}

fn labels_of(preds: &[Prediction]) -> Vec<u32> {
    preds
        .iter()
        .map(|p| match p {
            Prediction::Label(l) => *l,
            Prediction::Tokens(_) => u32::MAX,
        })
        .collect()
}

fn connect(addr: &str, keys: ClientKeys) -> Result<ClientSession> {
    ClientSession::connect(addr, keys).with_context(|| format!("connecting to {addr}"))
}

pub fn tune(
    cfg: &Config,
    out: &Path,
    seed: u64,
    key: &Path,
    data: &Path,
    target: &Target,
) -> Result<()> {
    let mut run = RunDir::create(out, "tune", cfg, Some(seed))?;
    let kp = load_key(&mut run, key)?;
    let data = load_task_data(&mut run, "data", data)?;
    let tcfg = TuneConfig {
        seed,
        ..cfg.tune.clone()
    };
    let mut log = String::from("step\tloss\n");
    let model_hash = match target {
        Target::Local(path) => {
            let mut m = load_model(&mut run, "model", path)?;
            let keys = client_keys(cfg, &kp, m.dims().classes);
            let losses = private_tune(&mut m, &data, &keys, &tcfg).context("private tuning")?;
            // Numbered like server acks: the step count after applying.
            for (i, l) in losses.iter().enumerate() {
                let _ = writeln!(log, "{}\t{l:.6}", i + 1);
            }
            if let Some(l) = losses.last() {
                run.metric("final_loss", *l);
            }
            run.write("model", "model.ckpt", &m.to_bytes())?;
            m.hash()
        }
        Target::Remote(addr) => {
            run.note("server", addr.clone());
            // The handshake rejects a config whose dims differ from the server's.
            let mut session = connect(addr, client_keys(cfg, &kp, cfg.dims.classes))?;
            let acks = session.tune(&data, &tcfg).context("remote tuning")?;
            for a in &acks {
                let _ = writeln!(log, "{}\t{:.6}", a.step, a.loss);
            }
            if let Some(a) = acks.last() {
                run.metric("final_loss", a.loss);
                a.model_sha256.clone()
            } else {
                session.status()?.model_sha256
            }
        }
    };
    run.write("metrics", "tune.tsv", log.as_bytes())?;
    run.note("model_sha256", model_hash.clone());
    let dir = run.finish()?;
    println!(
        "tuned model {model_hash}; log in {}",
        dir.join("tune.tsv").display()
    );
    Ok(())
}

/// Sequences, and their labels when every line carries one.
type InferenceInputs = (Vec<Vec<u32>>, Option<Vec<u32>>);

/// One sequence per line: space-separated ids, optionally a TAB and a label.
fn read_inference_inputs(path: &Path) -> Result<InferenceInputs> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |reason: String| {
            anyhow::Error::new(cyphertalk::error::Error::Input {
                position: i + 1,
                reason,
            })
            .context(format!("reading {}", path.display()))
        };
        let (ids, label) = match line.split_once('\t') {
            Some((ids, rest)) => (ids, Some(rest.trim())),
            None => (line, None),
        };
        let ids: Vec<u32> = ids
            .split_whitespace()
            .map(|t| t.parse().map_err(|e| bad(format!("bad id {t:?}: {e}"))))
            .collect::<Result<_>>()?;
        if ids.is_empty() {
            return Err(bad("empty id sequence".into()));
        }
        inputs.push(ids);
        labels.push(label.and_then(|l| l.parse::<u32>().ok()));
    }
    let labels = labels.into_iter().collect::<Option<Vec<u32>>>();
    Ok((inputs, labels))
}

pub fn infer(
    cfg: &Config,
    out: &Path,
    key: &Path,
    data: &Path,
    mode: Mode,
    target: &Target,
) -> Result<()> {
    let mut run = RunDir::create(out, "infer", cfg, None)?;
    let kp = load_key(&mut run, key)?;
    run.input("data", data)?;
    let (inputs, labels) = read_inference_inputs(data)?;
    let preds = match target {
        Target::Local(path) => {
            let m = load_model(&mut run, "model", path)?;
            private_infer(&m, &inputs, &client_keys(cfg, &kp, m.dims().classes), mode)?
        }
        Target::Remote(addr) => {
            run.note("server", addr.clone());
            connect(addr, client_keys(cfg, &kp, cfg.dims.classes))?.infer(&inputs, mode)?
        }
    };
    let mut text = String::new();
    for p in &preds {
        match p {
            Prediction::Label(l) => {
                let _ = writeln!(text, "{l}");
            }
            Prediction::Tokens(t) => {
                let _ = writeln!(text, "{}", join_ids(t));
            }
        }
    }
    run.write("predictions", "predictions.tsv", text.as_bytes())?;
    run.metric("sequences", preds.len() as f64);
    if let (Mode::Task, Some(labels)) = (mode, labels) {
        let acc = accuracy(&labels_of(&preds), &labels);
        run.metric("accuracy", acc);
        println!("accuracy {acc:.4} on {} sequences", labels.len());
    }
    let dir = run.finish()?;
    println!(
        "{} predictions written to {}",
        preds.len(),
        dir.join("predictions.tsv").display()
    );
    Ok(())
}

pub struct AttackArgs<'a> {
    pub original: &'a Path,
    pub model: &'a Path,
    pub key: &'a Path,
    /// Output of `synth`: enables the attribute probe.
    pub data_dir: Option<&'a Path>,
}

pub fn attack(cfg: &Config, out: &Path, args: &AttackArgs) -> Result<()> {
    let mut run = RunDir::create(out, "attack", cfg, None)?;
    let original = load_model(&mut run, "original", args.original)?;
    let model = load_model(&mut run, "model", args.model)?;
    let kp = load_key(&mut run, args.key)?;
    if original.dims().vocab != model.dims().vocab || original.dims().dim != model.dims().dim {
        return Err(cyphertalk::error::Error::Incompatible(format!(
            "original is V={} d={}, model is V={} d={}",
            original.dims().vocab,
            original.dims().dim,
            model.dims().vocab,
            model.dims().dim
        ))
        .into());
    }
    let encoding = kp.encoding_key(cfg.hs_once);
    let mut records: Vec<AttackRecord> =
        inversion_records(original.embedding(), model.embedding(), &encoding)?;
    if let Some(dir) = args.data_dir {
        let train = load_task_data(&mut run, "train", &dir.join("train.tsv"))?;
        let test = load_task_data(&mut run, "test", &dir.join("test.tsv"))?;
        let train_attr = read_attributes(&mut run, &dir.join("train.attr"))?;
        let test_attr = read_attributes(&mut run, &dir.join("test.attr"))?;
        let (train_inputs, test_inputs) = (train.inputs(), test.inputs());
        let data = AttributeData {
            train_inputs: &train_inputs,
            train_attributes: &train_attr,
            test_inputs: &test_inputs,
            test_attributes: &test_attr,
        };
        let study = attribute_probe(
            original.embedding(),
            model.embedding(),
            &encoding,
            &data,
            &cfg.probe,
        )?;
        records.extend(study.records());
    }
    let mut lines = String::new();
    for r in &records {
        lines.push_str(&r.to_json_line());
        lines.push('\n');
        run.metric(format!("{}/{}", r.attack, r.setting), r.rate);
        println!("{:<10} {:<20} {:.4}", r.attack, r.setting, r.rate);
    }
    run.write("report", "attacks.jsonl", lines.as_bytes())?;
    run.finish()?;
    Ok(())
}

fn summary_table(results: &[CheckResult]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<6} {:<4} {:>8}  {:<44} detail",
        "check", "ok", "seconds", "title"
    );
    for r in results {
        let _ = writeln!(
            s,
            "{:<6} {:<4} {:>8.1}  {:<44} {}",
            r.id,
            if r.pass { "PASS" } else { "FAIL" },
            r.seconds,
            r.title,
            r.detail
        );
    }
    let passed = results.iter().filter(|r| r.pass).count();
    let _ = writeln!(s, "{passed}/{} checks passed", results.len());
    s
}

fn metrics_csv(results: &[CheckResult]) -> String {
    let mut s = String::from("check,metric,value\n");
    for r in results {
        let _ = writeln!(s, "{},pass,{}", r.id, u8::from(r.pass));
        let _ = writeln!(s, "{},seconds,{:.3}", r.id, r.seconds);
        for (name, value) in &r.metrics {
            let _ = writeln!(s, "{},{name},{value}", r.id);
        }
    }
    s
}

pub fn bench(cfg: &Config, out: &Path, seed: u64) -> Result<()> {
    let ecfg = cfg.experiment(seed)?;
    let mut run = RunDir::create(out, "bench", cfg, Some(seed))?;
    println!("running all checks; the recovery study takes a few minutes");
    let results = run_all(&ecfg, |r| {
        println!("{}", r.line());
        let _ = std::io::stdout().flush();
    });
    let table = summary_table(&results);
    run.write("summary", "summary.txt", table.as_bytes())?;
    run.write("metrics", "bench.csv", metrics_csv(&results).as_bytes())?;
    let failed: Vec<&str> = results.iter().filter(|r| !r.pass).map(|r| r.id).collect();
    for r in &results {
        run.metric(format!("{}/pass", r.id), f64::from(u8::from(r.pass)));
    }
    let dir = run.finish()?;
    print!("\n{table}");
    println!("summary and CSV in {}", dir.display());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::new(
            ErrorClass::ChecksFailed,
            format!("failed checks: {}", failed.join(", ")),
        )
        .into())
    }
}

pub fn serve_cmd(checkpoint: &Path, bind: SocketAddr, persist: bool) -> Result<()> {
    let model = LanguageModel::load(checkpoint)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let cfg = ServerConfig {
        persist: persist.then(|| checkpoint.to_path_buf()),
    };
    let hash = model.hash();
    let handle = serve(model, bind, cfg).with_context(|| format!("binding {bind}"))?;
    info!("serving model {hash}");
    println!("listening on {}", handle.local_addr());
    let _ = std::io::stdout().flush();
    handle.wait();
    Ok(())
}
