use std::process::ExitCode;

use clap::{Parser, Subcommand};
use enigma::cli::{self, EvalArgs, ProbeArgs, TrainArgs};

#[derive(Parser)]
#[command(
    name = "enigma",
    version,
    about = "Toy reasoning-policy training and principle-set diagnostics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a toy policy from a run config.
    Train(TrainArgs),
    /// Score one or more principle sets and report the Sufficiency Index.
    EvalConstitution(EvalArgs),
    /// Information-geometry probes over saved checkpoints.
    Probe(ProbeArgs),
}

fn main() -> ExitCode {
    let args = Cli::parse();
    let code = match &args.command {
        Command::Train(a) => {
            let r = cli::cmd_train(a);
            if let Ok(dir) = &r {
                println!("{}", dir.display());
            }
            report(r)
        }
        Command::EvalConstitution(a) => {
            let r = cli::cmd_eval_constitution(a);
            if let Ok(reports) = &r {
                for rep in reports {
                    match rep.si_zscored {
                        Some(z) => println!(
                            "{}\tSI={:.4}\tSI_z={:+.4}\tleaky={}",
                            rep.name, rep.si, z, rep.leaky.count
                        ),
                        None => println!("{}\tSI={:.4}\tleaky={}", rep.name, rep.si, rep.leaky.count),
                    }
                }
            }
            report(r)
        }
        Command::Probe(a) => {
            let r = cli::cmd_probe(a);
            if let Ok(dir) = &r {
                println!("{}", dir.display());
            }
            report(r)
        }
    };
    ExitCode::from(code as u8)
}

fn report<T>(r: enigma::Result<T>) -> i32 {
    let code = cli::exit_code(&r);
    if let Err(e) = r {
        eprintln!("error: {e}");
    }
    code
}
