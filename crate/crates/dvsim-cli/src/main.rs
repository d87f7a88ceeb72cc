// SPDX-License-Identifier: Apache-2.0

//! `dv-bench` — run delegated-virtualization benchmark scenarios and price
//! their traces under both the delegated and the kernel-mediated cost model.

use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};

use dvsim::bench::{run_scenario, CostModel};
use dvsim::guest::disassemble;
use dvsim::hw::access_table_csv;
use dvsim::scenario::Scenario;

#[derive(Parser)]
#[command(
    name = "dv-bench",
    version,
    about = "Deterministic benchmark harness for the delegated-virtualization simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Json,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and print the two-architecture cost report.
    Run {
        /// Built-in scenario name or path to a scenario TOML file.
        scenario: String,
        /// Built-in cost-model name or path to a model TOML file.
        #[arg(long, default_value = "default")]
        cost_model: String,
        /// Scheduler seed; identical seeds reproduce identical reports.
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Override the scenario's iteration count.
        #[arg(long)]
        iterations: Option<u64>,
        /// Output format.
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List the built-in scenarios.
    ListScenarios,
    /// Print the register access-control table (CSV), generated by probing
    /// the modeled hardware.
    DumpAccessTable,
    /// Assemble a scenario's guest programs and print their disassembly.
    Disasm {
        /// Built-in scenario name or path to a scenario TOML file.
        scenario: String,
        /// Iteration count used to expand `$ITER` / `$HALF_ITER`.
        #[arg(long)]
        iterations: Option<u64>,
    },
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Run { scenario, cost_model, seed, iterations, format, out } => {
            let scenario = Scenario::resolve(&scenario)
                .with_context(|| format!("loading scenario `{scenario}`"))?;
            let model = CostModel::resolve(&cost_model)
                .with_context(|| format!("loading cost model `{cost_model}`"))?;
            let report = run_scenario(&scenario, &model, seed, iterations)
                .with_context(|| format!("running scenario `{}`", scenario.name))?;
            let rendered = match format {
                Format::Text => report.to_text(),
                Format::Json => report.to_json(),
                Format::Csv => report.to_csv(),
            };
            match out {
                Some(path) => std::fs::write(&path, rendered)
                    .with_context(|| format!("writing report to {}", path.display()))?,
                None => print!("{rendered}"),
            }
        }
        Command::ListScenarios => {
            for (name, description) in Scenario::list_builtin() {
                println!("{name:<12} {description}");
            }
        }
        Command::DumpAccessTable => print!("{}", access_table_csv()),
        Command::Disasm { scenario, iterations } => {
            let scenario = Scenario::resolve(&scenario)
                .with_context(|| format!("loading scenario `{scenario}`"))?;
            let cfg = scenario.machine_config(0, iterations)?;
            for vm in &cfg.vms {
                for (vcpu, prog) in vm.programs.iter().enumerate() {
                    println!("; VM pid {} vCPU {}", vm.pid, vcpu);
                    print!("{}", disassemble(prog));
                    println!();
                }
            }
        }
    }
    Ok(())
}
