use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use avp_cp::bev::{BevMap, ChannelMatrix};
use avp_cp::codec::{compress, synthetic_sparse_map, CodecConfig, Quantization, SizeReport};
use avp_cp::control::heatmap_csv;
use avp_cp::garage::{build_default_map, Scenario};
use avp_cp::harness::{run_experiment, write_outputs, ExperimentSpec};
use avp_cp::link::{budget_check, LinkConfig};
use avp_cp::perception::{CalibrationTable, InfraConfig, VehicleConfig};
use avp_cp::Error;

#[derive(Parser)]
#[command(name = "avp-cp", version, about = "Collaborative perception for automated valet parking")]
struct Cli {
    /// Print the garage geometry as JSON and exit.
    #[arg(long)]
    dump_map: bool,
    /// Map seed used with --dump-map.
    #[arg(long, default_value_t = 0)]
    map_seed: u64,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Encode a dense BEV map and report its sizes.
    Compress {
        /// Dense map file (BEVM container).
        #[arg(long = "in")]
        input: Option<PathBuf>,
        /// Generate a 376x280x64 synthetic input of this sparsity instead of reading one.
        #[arg(long, conflicts_with = "input")]
        synthetic: Option<f64>,
        #[arg(long, default_value_t = 1e-3)]
        sparsity_threshold: f32,
        #[arg(long, default_value = "f16")]
        quant: String,
        /// Channel reduction factor of the 1x1 projection.
        #[arg(long, default_value_t = 8)]
        channel_factor: usize,
        /// Skip the 2x2 max pooling.
        #[arg(long)]
        no_downsample: bool,
        /// Encoder weights (BEVW); a seeded orthonormal projection otherwise.
        #[arg(long)]
        encoder: Option<PathBuf>,
        /// Write the encoded frame here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the size report here as JSON (printed to stdout as well).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Write a synthetic dense map file.
    SynthMap {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.85)]
        sparsity: f64,
        #[arg(long, default_value_t = 376)]
        height: usize,
        #[arg(long, default_value_t = 280)]
        width: usize,
        #[arg(long, default_value_t = 64)]
        channels: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Check a frame stream against the link rate.
    Linkcheck {
        #[arg(long)]
        frame_bytes: usize,
        #[arg(long, default_value_t = 20.0)]
        hz: f64,
        #[arg(long, default_value_t = 19.1)]
        rate_mbps: f64,
    },
    /// Target-speed field over (longitudinal, lateral) gaps as CSV.
    Heatmap {
        #[arg(long, default_value_t = 5.0)]
        cruise_speed: f64,
        #[arg(long, default_value_t = 15.0)]
        max_longitudinal: f64,
        #[arg(long, default_value_t = 8.0)]
        max_lateral: f64,
        #[arg(long, default_value_t = 0.1)]
        step: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run trials for one configuration at one speed.
    Simulate {
        #[arg(long)]
        scenario: String,
        #[arg(long, default_value = "cam")]
        veh: String,
        #[arg(long, default_value = "none")]
        infra: String,
        #[arg(long)]
        speed: f64,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Calibration table JSON; the shipped defaults otherwise.
        #[arg(long)]
        calibration: Option<PathBuf>,
        /// Also write every trial (with trajectories) to trials.json.
        #[arg(long)]
        trajectories: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one or more experiment specs from a JSON file.
    Sweep {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value = "sweep-out")]
        out: PathBuf,
    },
}

/// A sweep file holds one spec or a list of them.
#[derive(Deserialize)]
#[serde(untagged)]
enum SpecFile {
    One(ExperimentSpec),
    Many(Vec<ExperimentSpec>),
}

#[derive(Serialize)]
struct CompressReport {
    input_shape: [usize; 3],
    #[serde(flatten)]
    sizes: SizeReport,
    transmitted_shape: [u16; 3],
    quantization: Quantization,
}

fn parse_quant(s: &str) -> avp_cp::Result<Quantization> {
    match s {
        "f16" | "float16" => Ok(Quantization::Float16),
        "f32" | "float32" => Ok(Quantization::Float32),
        _ => Err(Error::Config(format!("unknown quantization {s:?} (expected f16 or f32)"))),
    }
}

fn write_or_print(path: Option<&Path>, text: &str) -> avp_cp::Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

fn run(cli: Cli) -> avp_cp::Result<()> {
    if cli.dump_map {
        print!("{}\n", build_default_map(cli.map_seed).to_json());
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(Error::Config("no command given (try --help)".into()));
    };
    match command {
        Command::Compress {
            input,
            synthetic,
            sparsity_threshold,
            quant,
            channel_factor,
            no_downsample,
            encoder,
            out,
            report,
        } => {
            let cfg = CodecConfig {
                sparsity_threshold,
                quantization: parse_quant(&quant)?,
                channel_factor,
                downsample: !no_downsample,
            };
            let map = match (input, synthetic) {
                (Some(p), _) => BevMap::load(&p)?,
                (None, Some(s)) => {
                    if !(0.0..=1.0).contains(&s) {
                        return Err(Error::Config(format!("synthetic sparsity must be in [0, 1], got {s}")));
                    }
                    synthetic_sparse_map(376, 280, 64, 1.0 - s, 0)?
                }
                (None, None) => return Err(Error::Config("compress needs --in or --synthetic".into())),
            };
            cfg.validate(map.channels())?;
            let enc = match encoder {
                Some(p) => ChannelMatrix::load(&p)?,
                None => ChannelMatrix::default_codec_pair(map.channels(), channel_factor, 0)?.0,
            };
            let frame = compress(&map, &cfg, &enc)?;
            if let Some(p) = &out {
                std::fs::write(p, frame.serialize()).map_err(|e| Error::io(p, e))?;
            }
            let h = frame.header;
            let rep = CompressReport {
                input_shape: [map.height(), map.width(), map.channels()],
                sizes: SizeReport::new(&map, &frame),
                transmitted_shape: [h.height, h.width, h.channels],
                quantization: cfg.quantization,
            };
            let text = json(&rep);
            if let Some(p) = &report {
                std::fs::write(p, &text).map_err(|e| Error::io(p, e))?;
            }
            print!("{text}");
        }
        Command::SynthMap { out, sparsity, height, width, channels, seed } => {
            if !(0.0..=1.0).contains(&sparsity) {
                return Err(Error::Config(format!("sparsity must be in [0, 1], got {sparsity}")));
            }
            synthetic_sparse_map(height, width, channels, 1.0 - sparsity, seed)?.save(&out)?;
        }
        Command::Linkcheck { frame_bytes, hz, rate_mbps } => {
            let cfg = LinkConfig::with_rate_mbps(rate_mbps);
            cfg.validate()?;
            let report = budget_check(frame_bytes, hz, &cfg).map_err(|e| Error::Config(e.to_string()))?;
            print!("{}", json(&report));
        }
        Command::Heatmap { cruise_speed, max_longitudinal, max_lateral, step, out } => {
            if !(step > 0.0 && cruise_speed > 0.0 && max_longitudinal >= 0.0 && max_lateral >= 0.0) {
                return Err(Error::Config("heatmap needs step > 0, speed > 0 and non-negative extents".into()));
            }
            write_or_print(out.as_deref(), &heatmap_csv(cruise_speed, max_longitudinal, max_lateral, step))?;
        }
        Command::Simulate { scenario, veh, infra, speed, trials, seed, calibration, trajectories, out } => {
            let scenario: Scenario = scenario.parse()?;
            let mut spec = ExperimentSpec::for_scenario(scenario);
            spec.vehicle_configs = vec![veh.parse::<VehicleConfig>()?];
            spec.infra_configs = vec![infra.parse::<InfraConfig>()?];
            spec.speeds = vec![speed];
            spec.trials = trials;
            spec.base_seed = seed;
            spec.record_trajectory = trajectories;
            if let Some(p) = calibration {
                spec.calibration = CalibrationTable::load(&p)?;
            }
            let output = run_experiment(&spec, None)?;
            write_outputs(&[&output], &out)?;
            if trajectories {
                let p = out.join("trials.json");
                std::fs::write(&p, json(&output.records)).map_err(|e| Error::io(&p, e))?;
            }
            let cell = output.table.cells[0];
            println!(
                "{} {} {} v={:.1}: {}/{} crashes",
                scenario.short_name(),
                cell.vehicle,
                cell.infra,
                cell.speed,
                cell.crashes,
                cell.trials
            );
        }
        Command::Sweep { spec, out } => {
            let text = std::fs::read_to_string(&spec).map_err(|e| Error::io(&spec, e))?;
            let specs = match serde_json::from_str::<SpecFile>(&text) {
                Ok(SpecFile::One(s)) => vec![s],
                Ok(SpecFile::Many(v)) => v,
                Err(e) => return Err(Error::Config(format!("{}: {e}", spec.display()))),
            };
            let outputs = specs.iter().map(|s| run_experiment(s, None)).collect::<avp_cp::Result<Vec<_>>>()?;
            let refs: Vec<_> = outputs.iter().collect();
            write_outputs(&refs, &out)?;
            for o in &outputs {
                for &v in &o.spec.vehicle_configs {
                    for &i in &o.spec.infra_configs {
                        let row = o.table.row(v, i);
                        let counts: Vec<String> = row.iter().map(|c| format!("{}/{}", c.crashes, c.trials)).collect();
                        let safe = avp_cp::harness::max_safe_speed(&o.table, v, i)
                            .map_or("below grid".to_string(), |s| format!("{s:.1}"));
                        println!("{} {:>9} {:>9}  {}  max safe {}", o.table.scenario.short_name(), v.as_str(), i.as_str(), counts.join(" "), safe);
                    }
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Argument(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
