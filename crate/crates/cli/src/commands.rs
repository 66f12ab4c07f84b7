use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use fuyu_core::bench::{measure_throughput, verify_equivalence, Workload};
use fuyu_core::eval::fixture::{write_fixture, FIXTURE_SEED};
use fuyu_core::eval::{
    evaluate, load_records, model_responder, report, ExternalJudge, ExternalJudgeConfig, Judge,
    Protocol, StubJudge,
};
use fuyu_core::instruct::{ImageRef, InstructionSample, SpecialTokens};
use fuyu_core::lora::{LoraConfig, LoraModel};
use fuyu_core::model::{AttentionKernel, ModelConfig, ModelParams};
use fuyu_core::patch::{patchify, token_budget, RawImage, ResizePolicy};
use fuyu_core::train::{
    greedy_answer, load_inference_params, stream_rng, streams, toy, train, MixtureManifest,
    TrainConfig, TrainMode, Trainable,
};
use fuyu_core::{Error, Result};
use serde_json::json;

use crate::config::FileConfig;
use crate::{Cli, Command, JudgeArg, ModeArg, SynthTask};

struct Globals {
    seed: u64,
    checkpoint_dir: Option<PathBuf>,
    file: FileConfig,
}

impl Globals {
    fn checkpoint(&self, flag: Option<PathBuf>) -> Result<PathBuf> {
        flag.or_else(|| self.checkpoint_dir.clone()).ok_or_else(|| {
            Error::Config("no --checkpoint given and no --checkpoint-dir set".into())
        })
    }

    /// Loads weights; a settings file that names a model must match them.
    fn load_params(&self, path: &Path) -> Result<ModelParams> {
        let params = load_inference_params(path)?;
        if !self.file.has_model() {
            return Ok(params);
        }
        ModelParams::from_tensors(self.file.model_config()?, params.tensors().clone())
    }

    fn fresh_params(&self) -> Result<ModelParams> {
        ModelParams::init(
            &self.file.model_config()?,
            &mut stream_rng(self.seed, streams::INIT),
        )
    }
}

fn init_logging(level: &str) -> Result<()> {
    let filter = log::LevelFilter::from_str(level)
        .map_err(|_| Error::Config(format!("unknown log level {level:?}")))?;
    let _ = env_logger::Builder::new()
        .filter_level(filter)
        .format_timestamp(None)
        .try_init();
    Ok(())
}

fn write_json(path: &Path, v: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(v).expect("value serializes");
    std::fs::write(path, text + "\n").map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn policy(s: &str) -> Result<ResizePolicy> {
    let p = ResizePolicy::from_str(s)?;
    p.validate()?;
    Ok(p)
}

fn kernel(s: &str) -> Result<AttentionKernel> {
    if s == "naive" {
        return Ok(AttentionKernel::Naive);
    }
    let block = s
        .strip_prefix("blocked:")
        .and_then(|b| b.parse::<usize>().ok())
        .filter(|&b| b > 0)
        .ok_or_else(|| {
            Error::Config(format!("unknown kernel {s:?}; expected naive or blocked:N"))
        })?;
    Ok(AttentionKernel::blocked(block))
}

pub fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let level = cli
        .log_level
        .clone()
        .or_else(|| file.log_level.clone())
        .unwrap_or_else(|| "warn".into());
    init_logging(&level)?;
    let g = Globals {
        seed: cli.seed.or(file.seed).unwrap_or(0),
        checkpoint_dir: cli
            .checkpoint_dir
            .clone()
            .or_else(|| file.checkpoint_dir.clone()),
        file,
    };

    match cli.command {
        Command::CountTokens { width, height } => {
            let b = token_budget(width, height)?;
            println!("{}", serde_json::to_string(&b).expect("budget serializes"));
        }
        Command::Patchify {
            input,
            resolution,
            summary,
            out,
        } => {
            let img = RawImage::load(&input)?;
            let grid = patchify(
                &img,
                &policy(&resolution)?,
                &mut stream_rng(g.seed, streams::RESOLUTION),
            )?;
            let (w, h) = grid.resized_dims();
            let b = grid.budget();
            if let Some(out) = &out {
                let patches: Vec<Vec<f64>> = (0..grid.rows())
                    .flat_map(|r| (0..grid.cols()).map(move |c| (r, c)))
                    .map(|(r, c)| grid.patch(r, c).to_vec())
                    .collect();
                write_json(
                    out,
                    &json!({"rows": grid.rows(), "cols": grid.cols(), "patches": patches}),
                )?;
            }
            if summary || out.is_none() {
                let v = json!({
                    "input": [img.width(), img.height()],
                    "resized": [w, h],
                    "rows": grid.rows(),
                    "cols": grid.cols(),
                    "image_tokens": b.image_tokens,
                    "newline_tokens": b.newline_tokens,
                    "sequence_len": grid.sequence_len(),
                });
                println!("{v}");
            }
        }
        Command::Init { out } => {
            let p = g.fresh_params()?;
            p.save(&out)?;
            println!(
                "{}",
                json!({"checkpoint": out, "parameters": p.numel(), "digest": p.digest()})
            );
        }
        Command::Synth { task, out } => {
            let path = match task {
                SynthTask::Toy => toy::write_toy_task(&out)?,
                SynthTask::Eval => write_fixture(&out, FIXTURE_SEED)?,
            };
            println!("{}", json!({ "written": path }));
        }
        Command::Train {
            manifest,
            resolution,
            mode,
            out,
            init,
            epochs,
            batch,
            lr,
            weight_decay,
            warmup,
            grad_accum,
            lora_rank,
            lora_alpha,
        } => {
            let out = g.checkpoint(out)?;
            let model_cfg = match &init {
                Some(p) => g.load_params(p)?.config().clone(),
                None => g.file.model_config()?,
            };
            let base = match mode {
                ModeArg::Full => TrainConfig::standard_full(),
                ModeArg::Lora => TrainConfig::standard_lora(&model_cfg),
            };
            let mut cfg = g.file.train_config(base)?;
            cfg.seed = g.seed;
            if let Some(r) = resolution {
                cfg.resolution = policy(&r)?;
            }
            if let Some(v) = epochs {
                cfg.epochs = v;
            }
            if let Some(v) = batch {
                cfg.batch_size = v;
                // micro-batches of one unless asked otherwise
                cfg.grad_accum = v;
            }
            if let Some(v) = grad_accum {
                cfg.grad_accum = v;
            }
            cfg.grad_accum = cfg.grad_accum.min(cfg.batch_size);
            if let Some(v) = lr {
                cfg.lr = v;
            }
            if let Some(v) = weight_decay {
                cfg.weight_decay = v;
            }
            if let Some(v) = warmup {
                cfg.warmup_ratio = v;
            }
            match (mode, &mut cfg.mode) {
                (ModeArg::Full, m) => *m = TrainMode::Full,
                (ModeArg::Lora, TrainMode::Lora(l)) => {
                    if let Some(r) = lora_rank {
                        l.r = r;
                    }
                    if let Some(a) = lora_alpha {
                        l.alpha = a;
                    }
                }
                (ModeArg::Lora, m) => *m = TrainMode::Lora(LoraConfig::standard(&model_cfg, true)),
            }
            if mode == ModeArg::Full && (lora_rank.is_some() || lora_alpha.is_some()) {
                return Err(Error::Config(
                    "--lora-rank/--lora-alpha need --mode lora".into(),
                ));
            }

            let pool = MixtureManifest::load(&manifest)?.load_pool()?;
            let params = match &init {
                Some(p) => g.load_params(p)?,
                None => g.fresh_params()?,
            };
            let specials = SpecialTokens::for_vocab(params.config().vocab)?;
            let mut model = match &cfg.mode {
                TrainMode::Full => Trainable::Full(params),
                TrainMode::Lora(l) => Trainable::Lora(LoraModel::attach(
                    params,
                    l.clone(),
                    &mut stream_rng(g.seed, streams::ADAPTER_INIT),
                )?),
            };
            std::fs::create_dir_all(&out).map_err(|source| Error::Io {
                path: out.clone(),
                source,
            })?;
            write_json(
                &out.join("train_config.json"),
                &serde_json::to_value(&cfg).expect("config serializes"),
            )?;
            let rep = train(&pool, &mut model, &cfg, &specials, Some(&out))?;
            write_json(
                &out.join("report.json"),
                &serde_json::to_value(&rep).expect("report serializes"),
            )?;
            println!(
                "{}",
                json!({
                    "out": out,
                    "steps": rep.total_steps,
                    "trainable_params": rep.trainable_params,
                    "final_loss": rep.final_loss(),
                    "base_digest": rep.base_digest_after,
                })
            );
        }
        Command::Generate {
            checkpoint,
            image,
            instruction,
            resolution,
            max_new,
        } => {
            if max_new == 0 {
                return Err(Error::Contract("--max-new must be >= 1".into()));
            }
            let params = g.load_params(&g.checkpoint(checkpoint)?)?;
            let specials = SpecialTokens::for_vocab(params.config().vocab)?;
            let sample = InstructionSample {
                image: ImageRef::Path(image),
                instruction,
                answer: String::new(),
                dataset: String::new(),
            };
            let mut rng = stream_rng(g.seed, streams::EVAL);
            let text = greedy_answer(
                &params,
                &sample,
                &policy(&resolution)?,
                &specials,
                max_new,
                &mut rng,
            )?;
            println!("{text}");
        }
        Command::Eval {
            dataset,
            checkpoint,
            protocol,
            judge,
            resolution,
            out,
            concurrency,
            max_new,
        } => {
            let protocols = Protocol::parse_set(&protocol)?;
            if concurrency == 0 || max_new == 0 {
                return Err(Error::Config(
                    "--concurrency and --max-new must be >= 1".into(),
                ));
            }
            let policy = policy(&resolution)?;
            let judge: Box<dyn Judge> = match judge {
                JudgeArg::Stub => Box::new(StubJudge),
                JudgeArg::External => {
                    Box::new(ExternalJudge::new(ExternalJudgeConfig::from_env()?))
                }
            };
            let records = load_records(&dataset)?;
            let params = g.load_params(&g.checkpoint(checkpoint)?)?;
            let specials = SpecialTokens::for_vocab(params.config().vocab)?;
            let respond = model_responder(
                &params,
                &policy,
                &specials,
                max_new,
                stream_rng(g.seed, streams::EVAL),
            );
            let verdicts = evaluate(&records, &protocols, respond, judge.as_ref(), concurrency)?;
            let rep = report(&verdicts)?;
            print!("{}", rep.to_text());
            if let Some(out) = out {
                let mut v = serde_json::to_value(&rep).expect("report serializes");
                v["verdicts"] = serde_json::to_value(&verdicts).expect("verdicts serialize");
                write_json(&out, &v)?;
            }
        }
        Command::Bench {
            resolution,
            batch,
            window,
            text_len,
            kernel: kernel_name,
            checkpoint,
            out,
        } => {
            if !window.is_finite() || window <= 0.0 {
                return Err(Error::Config(
                    "--window must be a positive number of seconds".into(),
                ));
            }
            let kernel = kernel(&kernel_name)?;
            let params = match checkpoint.or_else(|| g.checkpoint_dir.clone()) {
                Some(p) => g.load_params(&p)?,
                None => g.fresh_params()?,
            };
            let workload = Workload {
                resolution,
                batch,
                text_len,
            };
            let cfg: &ModelConfig = params.config();
            if workload.sample_tokens()? > cfg.max_seq {
                return Err(Error::Capacity {
                    len: workload.sample_tokens()?,
                    max_seq: cfg.max_seq,
                });
            }
            let equivalence =
                verify_equivalence(&params, AttentionKernel::Naive, kernel, 4, g.seed)?;
            let broken = AttentionKernel::Blocked {
                block: 16,
                causal: false,
            };
            let control = verify_equivalence(&params, AttentionKernel::Naive, broken, 4, g.seed)?;
            let tp = measure_throughput(
                &params,
                workload,
                Duration::from_secs_f64(window),
                kernel,
                g.seed,
            )?;
            let v = json!({
                "throughput": tp,
                "equivalence": equivalence,
                "negative_control": {"detected": !control.passed, "report": control},
            });
            println!(
                "{}",
                serde_json::to_string_pretty(&v).expect("report serializes")
            );
            if let Some(out) = out {
                write_json(&out, &v)?;
            }
            if !equivalence.passed {
                return Err(Error::Contract(format!(
                    "{kernel_name} deviates from the reference by {:e}",
                    equivalence.max_abs_deviation
                )));
            }
        }
    }
    Ok(())
}
