use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use xmodal_core::ae::{self, TrainConfig};
use xmodal_core::checkpoint::ModelCheckpoint;
use xmodal_core::downstream::{default_phenotypes, fit_heads};
use xmodal_core::latent::LatentTable;
use xmodal_core::synth::{generate_cohort, Dataset};
use xmodal_core::tsne::TsneConfig;
use xmodal_explorer::session::{compute_embeddings, save_embeddings};
use xmodal_explorer::{router, SessionState};

#[derive(Parser)]
#[command(name = "xmodal", version, about = "Cross-modal latent space explorer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic paired ECG/MRI cohort (manifest.json + subjects.bin).
    Generate {
        #[arg(short, long, default_value_t = 2000)]
        n: usize,
        #[arg(short, long, default_value_t = 7)]
        seed: u64,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Train the autoencoder and the downstream heads; writes model.ckpt.
    Train(TrainArgs),
    /// Precompute the t-SNE layouts served by `serve`.
    Embed {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long, default_value_t = 30.0)]
        perplexity: f64,
        #[arg(long, default_value_t = 750)]
        iterations: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Serve the JSON API.
    Serve {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Layouts from `embed`; computed at startup when omitted.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
        #[arg(short, long, env = "XMODAL_PORT", default_value_t = 8080)]
        port: u16,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Output file, conventionally `model.ckpt`.
    #[arg(short, long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    latent_dim: usize,
    #[arg(long, default_value_t = 512)]
    hidden_width: usize,
    #[arg(long, default_value_t = 0.1)]
    temperature: f64,
    #[arg(long, default_value_t = 1.0)]
    contrastive_weight: f64,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 200)]
    max_epochs: usize,
    #[arg(long, default_value_t = 20)]
    patience: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    cross_reconstruction: bool,
    /// Skip fitting the downstream prediction heads.
    #[arg(long)]
    no_heads: bool,
}

impl TrainArgs {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            latent_dim: self.latent_dim,
            hidden_width: self.hidden_width,
            temperature: self.temperature,
            contrastive_weight: self.contrastive_weight,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            lr: self.lr,
            seed: self.seed,
            cross_reconstruction: self.cross_reconstruction,
        }
    }
}

fn train(args: &TrainArgs) -> Result<(), Box<dyn std::error::Error>> {
    let dataset = Dataset::load(&args.dataset)?;
    let start = Instant::now();
    let trained = ae::train_with_observer(&dataset, &args.config(), |r| {
        eprintln!(
            "epoch {:>3}  train {:.4}  val {:.4} (ecg {:.4}, mri {:.4}, contrastive {:.4})",
            r.epoch,
            r.train_loss,
            r.validation.total,
            r.validation.recon_ecg,
            r.validation.recon_mri,
            r.validation.contrastive
        )
    })?;
    eprintln!(
        "best epoch {} (validation loss {:.5}) after {:.1?}",
        trained.epoch_of_best,
        trained.validation_loss_at_best,
        start.elapsed()
    );
    let mut checkpoint = ModelCheckpoint::from_trained(trained, &dataset);
    if !args.no_heads {
        let table = LatentTable::compute(&checkpoint.model, &dataset)?;
        checkpoint.heads = Some(fit_heads(&table, &dataset, &default_phenotypes())?);
    }
    checkpoint.save(&args.out)?;
    ModelCheckpoint::load(&args.out)?.verify(&dataset)?;
    eprintln!("wrote {}", args.out.display());
    Ok(())
}

async fn serve(state: SessionState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(state)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

fn run(cli: Cli) -> Result<(), Box<dyn std::error::Error>> {
    match cli.command {
        Command::Generate { n, seed, out } => {
            let manifest = generate_cohort(n, seed)?.save(&out)?;
            let s = &manifest.split_sizes;
            eprintln!(
                "wrote {} subjects to {} (train {}, validation {}, test {})",
                manifest.count,
                out.display(),
                s.train,
                s.validation,
                s.test
            );
        }
        Command::Train(args) => train(&args)?,
        Command::Embed {
            dataset,
            checkpoint,
            out,
            perplexity,
            iterations,
            seed,
        } => {
            let dataset = Dataset::load(dataset)?;
            let checkpoint = ModelCheckpoint::load(checkpoint)?;
            checkpoint.verify(&dataset)?;
            let table = LatentTable::compute(&checkpoint.model, &dataset)?;
            let config = TsneConfig {
                iterations,
                seed,
                ..TsneConfig::with_perplexity(perplexity)
            };
            let start = Instant::now();
            let embeddings = compute_embeddings(&table, &dataset.ids(), &config)?;
            save_embeddings(&embeddings, &out)?;
            eprintln!("wrote {} after {:.1?}", out.display(), start.elapsed());
        }
        Command::Serve {
            dataset,
            checkpoint,
            embeddings,
            host,
            port,
        } => {
            let start = Instant::now();
            let state = SessionState::load(dataset, checkpoint, embeddings.as_deref())?;
            eprintln!("session ready after {:.1?}", start.elapsed());
            tokio::runtime::Runtime::new()?.block_on(serve(state, SocketAddr::new(host, port)))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let invalid = e
                .downcast_ref::<xmodal_core::Error>()
                .is_some_and(|e| matches!(e, xmodal_core::Error::InvalidArgument(_)));
            ExitCode::from(if invalid { 2 } else { 1 })
        }
    }
}
