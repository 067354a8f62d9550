use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mcvd::channel::ProfileRequest;
use mcvd::error::{Error, Result};
use mcvd::modulation::Scheme;
use mcvd::runner::{
    self, EnvironmentSpec, ExperimentSpec, Fidelity, OutputKind, Preset, ProfileCache, Target,
};

/// Monte Carlo molecular communication in a flowing blood vessel.
#[derive(Debug, Parser)]
#[command(name = "mcvd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate the channel profile p_0..p_m of every sweep point.
    Channel(Common),
    /// BER of BCSK and BCSK-CPA, simulated and semi-analytical.
    Ber(Common),
    /// Eye diagrams and their metrics.
    Eye(Common),
    /// Rerun a named figure or table: fig3, fig4, fig5, fig6, table3.
    Reproduce {
        target: Target,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment TOML, or a manifest.json from an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<Preset>,
    #[arg(long)]
    scheme: Option<Scheme>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    fidelity: Option<Fidelity>,
    #[arg(long)]
    n_bits: Option<usize>,
    #[arg(long)]
    n_reps: Option<u64>,
}

impl Common {
    fn apply(&self, spec: &mut ExperimentSpec) {
        if let Some(p) = self.preset {
            spec.environment = EnvironmentSpec::preset(p);
            spec.sweep
                .retain(|a| a.parameter != runner::SweepParameter::Preset);
        }
        if let Some(s) = self.scheme {
            spec.modulation.schemes = vec![s];
        }
        if let Some(seed) = self.seed {
            spec.seed = seed;
        }
        if let Some(f) = self.fidelity {
            spec.fidelity = f;
        }
        if let Some(n) = self.n_bits {
            spec.n_bits = n;
        }
        if let Some(n) = self.n_reps {
            spec.n_reps = n;
        }
    }

    fn spec(&self, name: &str) -> Result<ExperimentSpec> {
        let mut spec = match &self.config {
            Some(path) => ExperimentSpec::load(path)?,
            None => ExperimentSpec {
                name: name.to_string(),
                ..ExperimentSpec::default()
            },
        };
        self.apply(&mut spec);
        Ok(spec)
    }
}

fn report(files: &[String], common: &Common) {
    for f in files {
        println!("{}", common.out.join(f).display());
    }
}

fn run(cli: Cli) -> Result<()> {
    let cache = ProfileCache::new();
    match cli.command {
        Command::Channel(common) => {
            let spec = common.spec("channel")?;
            spec.validate()?;
            std::fs::create_dir_all(&common.out).map_err(|e| Error::io(&common.out, e))?;
            for point in spec.points() {
                let req: ProfileRequest = spec.profile_request(&point);
                let profile = cache.get_or_estimate(&point.environment, &req)?;
                let name = format!("profile_{}.csv", point.label.replace(['=', ','], "_"));
                let path = common.out.join(&name);
                let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
                profile.write_csv(file)?;
                println!("{}\tp0={}", path.display(), profile.p0());
            }
        }
        Command::Ber(common) => {
            let mut spec = common.spec("ber")?;
            if common.config.is_none() {
                spec.outputs = vec![OutputKind::BerCsv];
            }
            let files = runner::write_outputs(&runner::execute(&spec, &cache)?, &common.out)?;
            report(&files, &common);
        }
        Command::Eye(common) => {
            let mut spec = common.spec("eye")?;
            if common.config.is_none() {
                spec.outputs = vec![
                    OutputKind::MetricsCsv,
                    OutputKind::EyeCsv,
                    OutputKind::EyeSvg,
                ];
            }
            let files = runner::write_outputs(&runner::execute(&spec, &cache)?, &common.out)?;
            report(&files, &common);
        }
        Command::Reproduce { target, common } => {
            let mut spec = match &common.config {
                Some(path) => ExperimentSpec::load(path)?,
                None => runner::reproduce_spec(target, 42),
            };
            common.apply(&mut spec);
            let files = runner::write_outputs(&runner::execute(&spec, &cache)?, &common.out)?;
            report(&files, &common);
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e.category() {
        "config" => 2,
        "argument" => 3,
        "model" => 4,
        "io" => 5,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(exit_code(&e))
        }
    }
}
