use clap::Parser;
use vssm_cli::cli::{Cli, Command};
use vssm_cli::config::{apply_file, load_file, Profile, RunConfig};
use vssm_cli::{bench, evalcmd, sample, trainer, CmdResult};

fn run(cli: Cli) -> CmdResult<()> {
    let profile = Profile::parse(&cli.profile)?;
    let mut cfg = RunConfig::for_profile(profile);
    if let Some(path) = &cli.config {
        let file = load_file(path)?;
        apply_file(&mut cfg, &file);
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }

    match cli.command {
        Command::Train {
            dataset,
            arch,
            threads,
            epochs,
            batch_size,
            lr,
            lambda,
            max_items,
            resume,
        } => trainer::cmd_train(
            cfg,
            &trainer::TrainArgs {
                dataset,
                arch,
                threads,
                epochs,
                batch_size,
                lr,
                lambda,
                max_items,
                resume,
                out: cli.out,
            },
        ),
        Command::Sample {
            checkpoint,
            dataset,
            cut,
            length,
            chunk,
            samples,
            mean_only,
        } => sample::cmd_sample(&sample::SampleArgs {
            checkpoint,
            dataset,
            cut,
            length,
            chunk,
            samples,
            mean_only,
            seed: cfg.seed,
            out: cli.out,
        }),
        Command::Eval {
            checkpoint,
            dataset,
            k,
            cuts,
            limit,
        } => evalcmd::cmd_eval(&evalcmd::EvalArgs {
            checkpoint,
            dataset,
            k,
            cuts,
            limit,
            seed: cfg.seed,
            out: cli.out,
        }),
        Command::Bench {
            checkpoint,
            baseline,
            lengths,
            cut,
            chunks,
            reps,
        } => bench::cmd_bench(&bench::BenchArgs {
            checkpoint,
            baseline,
            lengths,
            cut,
            chunks,
            reps,
            seed: cfg.seed,
            out: cli.out,
        }),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
