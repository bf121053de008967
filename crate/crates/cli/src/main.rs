use std::path::PathBuf;
use std::time::Duration;

use anyhow::Context;
use clap::{Parser, Subcommand};
use localrqa::corpus::DEFAULT_MAX_PASSAGE_TOKENS;
use localrqa::generator_train::{GeneratorAlgorithm, GeneratorTrainConfig};
use localrqa::nn::TransformerConfig;
use localrqa::pipeline::{PipelineManifest, SimpleRqaConfig, DEFAULT_K};
use localrqa::retriever_train::{RetrieverAlgorithm, RetrieverTrainConfig};
use localrqa::workflow::*;
use localrqa_serving::{Controller, ControllerConfig, Worker, WorkerConfig};

#[derive(Parser)]
#[command(name = "rqa", version, about = "Retrieval-augmented QA: data, training, evaluation and serving")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Chunk documents (a directory of .txt/.md files or a JSONL file) into passages.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MAX_PASSAGE_TOKENS)]
        max_tokens: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write questions and answers for sampled passages and split them.
    GenerateData {
        #[arg(long)]
        passages: PathBuf,
        /// `mock` (offline) or `remote` (RQA_LLM_ENDPOINT / RQA_LLM_KEY).
        #[arg(long, default_value = "mock")]
        client: String,
        #[arg(long, default_value_t = 600)]
        n_gold: usize,
        #[arg(long, default_value_t = 4)]
        hard_neg: usize,
        #[arg(long, default_value_t = 2)]
        questions_per_passage: usize,
        #[arg(long, default_value_t = 0.1)]
        val_fraction: f64,
        #[arg(long, default_value_t = 0.1)]
        test_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a dense retriever on the train split.
    TrainRetriever {
        #[arg(long, value_parser = parse_retriever_algo)]
        algo: RetrieverAlgorithm,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        passages: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        tau: f64,
        #[arg(long, default_value_t = 0.1)]
        gamma: f64,
        #[arg(long, default_value_t = 1.0)]
        beta: f64,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long, default_value_t = 1e-2)]
        lr: f64,
        #[arg(long, default_value_t = 8)]
        k_train: usize,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        /// Encoder-decoder (dca) or decoder (rpg) checkpoint used as teacher.
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a generator on the train split.
    TrainGenerator {
        #[arg(long, value_parser = parse_generator_algo)]
        algo: GeneratorAlgorithm,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        passages: PathBuf,
        /// Embedder checkpoint or `bm25`; needed by swr and fid.
        #[arg(long)]
        retriever: Option<String>,
        #[arg(long, default_value_t = 4)]
        k: usize,
        #[arg(long, default_value_t = 300)]
        steps: usize,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        #[arg(long, default_value_t = 3e-3)]
        lr: f64,
        #[arg(long, default_value_t = 32)]
        d_model: usize,
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Lay out a retrieval database directory (passages plus dense index).
    BuildIndex {
        #[arg(long)]
        passages: PathBuf,
        /// Embedder checkpoint or `bm25`.
        #[arg(long)]
        embedder: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a pipeline manifest for `eval`, `serve` and `worker`.
    Pipeline {
        #[arg(long)]
        database: PathBuf,
        #[arg(long)]
        embedder: String,
        /// Generator checkpoint, `mock` or `remote`.
        #[arg(long)]
        generator: String,
        #[arg(long, default_value_t = DEFAULT_K)]
        k: usize,
        #[arg(long, default_value_t = 64)]
        max_new_tokens: usize,
        /// Append the safety filter that answers "I don't know.".
        #[arg(long)]
        dont_know: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a pipeline on the test split and write predictions plus summary.
    Eval {
        #[arg(long)]
        pipeline: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        passages: PathBuf,
        #[arg(long, default_value_t = 4)]
        k: usize,
        #[arg(long, default_value = "none", value_parser = ["none", "mock", "remote"])]
        judge: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the controller: chat, feedback and annotation API.
    Serve {
        #[arg(long, default_value_t = 8000)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 1)]
        workers_expected: usize,
        #[arg(long, default_value = "./runs")]
        data_dir: PathBuf,
        /// Seconds without a heartbeat before a worker is evicted.
        #[arg(long, default_value_t = 30)]
        heartbeat_ttl: u64,
        /// Seconds before a chat turn fails with 504.
        #[arg(long, default_value_t = 120)]
        timeout: u64,
        /// Refuse workers whose pipeline identity differs.
        #[arg(long)]
        expected_identity: Option<String>,
        /// Directory holding the built web UI, served at `/`.
        #[arg(long)]
        static_dir: Option<PathBuf>,
    },
    /// Run a worker serving one pipeline.
    Worker {
        #[arg(long)]
        pipeline: PathBuf,
        #[arg(long, default_value = "http://127.0.0.1:8000")]
        controller: String,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 0)]
        port: u16,
        #[arg(long)]
        worker_id: Option<String>,
        #[arg(long, default_value_t = 10)]
        heartbeat_interval: u64,
    },
}

fn parse_retriever_algo(s: &str) -> Result<RetrieverAlgorithm, String> {
    s.parse().map_err(|e: localrqa::RqaError| e.to_string())
}

fn parse_generator_algo(s: &str) -> Result<GeneratorAlgorithm, String> {
    s.parse().map_err(|e: localrqa::RqaError| e.to_string())
}

fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Ingest { input, max_tokens, out } => {
            let store = ingest_to(&input, max_tokens, &out)?;
            println!("{} passages -> {}", store.len(), out.display());
        }
        Command::GenerateData {
            passages,
            client,
            n_gold,
            hard_neg,
            questions_per_passage,
            val_fraction,
            test_fraction,
            seed,
            out,
        } => {
            let args = GenerateDataArgs {
                client,
                n_gold,
                hard_neg,
                questions_per_passage,
                val_fraction,
                test_fraction,
                seed,
            };
            let pairs = generate_data_to(&passages, &args, &out)?;
            println!("{} pairs -> {}", pairs.len(), out.display());
        }
        Command::TrainRetriever {
            algo,
            data,
            passages,
            tau,
            gamma,
            beta,
            steps,
            batch_size,
            lr,
            k_train,
            dim,
            teacher,
            seed,
            out,
        } => {
            let mut config = RetrieverTrainConfig::new(algo);
            config.temperature_tau = tau;
            config.gamma = gamma;
            config.beta = beta;
            config.max_steps = steps;
            config.batch_size = batch_size;
            config.learning_rate = lr;
            config.k_train = k_train;
            config.seed = seed;
            train_retriever_to(&data, &passages, &TrainRetrieverArgs { config, dim, teacher }, &out)?;
            println!("retriever -> {}", out.display());
        }
        Command::TrainGenerator {
            algo,
            data,
            passages,
            retriever,
            k,
            steps,
            batch_size,
            lr,
            d_model,
            layers,
            seed,
            out,
        } => {
            let mut config = GeneratorTrainConfig::new(algo);
            config.k_context = k;
            config.max_steps = steps;
            config.batch_size = batch_size;
            config.learning_rate = lr;
            config.seed = seed;
            let model = TransformerConfig {
                d_model,
                d_ff: 2 * d_model,
                n_layers: layers,
                seed,
                ..TransformerConfig::default()
            };
            train_generator_to(&data, &passages, &TrainGeneratorArgs { config, model, retriever }, &out)?;
            println!("generator -> {}", out.display());
        }
        Command::BuildIndex { passages, embedder, out } => {
            build_database(&passages, &embedder, &out)?;
            println!("database -> {}", out.display());
        }
        Command::Pipeline {
            database,
            embedder,
            generator,
            k,
            max_new_tokens,
            dont_know,
            out,
        } => {
            let config = SimpleRqaConfig {
                database_path: database,
                embedder,
                generator,
                k,
                budget_tokens: localrqa::generation::DEFAULT_PROMPT_BUDGET,
                max_new_tokens,
            };
            let mut manifest = PipelineManifest::simple(&config)?;
            if dont_know {
                manifest = manifest.with("dont_know_filter");
            }
            manifest.save(&out)?;
            println!("pipeline -> {}", out.display());
        }
        Command::Eval {
            pipeline,
            test,
            passages,
            k,
            judge,
            out,
        } => {
            let summary = eval_to(&pipeline, &test, &passages, &EvalArgs { k, judge }, &out)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Serve {
            port,
            host,
            workers_expected,
            data_dir,
            heartbeat_ttl,
            timeout,
            expected_identity,
            static_dir,
        } => {
            let mut config = ControllerConfig::new(data_dir);
            config.workers_expected = workers_expected;
            config.heartbeat_ttl = Duration::from_secs(heartbeat_ttl);
            config.request_timeout = Duration::from_secs(timeout);
            config.expected_identity = expected_identity;
            config.static_dir = static_dir;
            let controller = Controller::new(config)?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind((host.as_str(), port)).await?;
                controller.serve(listener).await
            })?;
        }
        Command::Worker {
            pipeline,
            controller,
            host,
            port,
            worker_id,
            heartbeat_interval,
        } => {
            let base = pipeline.parent().map(PathBuf::from).unwrap_or_default();
            let built = PipelineManifest::load(&pipeline)?
                .build(&base)
                .with_context(|| format!("building {}", pipeline.display()))?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind((host.as_str(), port)).await?;
                let addr = listener.local_addr()?;
                let worker_id = worker_id.unwrap_or_else(|| format!("worker-{}", addr.port()));
                let worker = Worker::new(worker_id.clone(), built);
                let config = WorkerConfig {
                    worker_id,
                    base_url: format!("http://{addr}"),
                    controller_url: controller,
                    heartbeat_interval: Duration::from_secs(heartbeat_interval),
                };
                worker.run(listener, config).await
            })?;
        }
    }
    Ok(())
}
