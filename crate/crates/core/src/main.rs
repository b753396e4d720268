use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use tracing::Level;
use url::Url;

use psvc::broker::Broker;
use psvc::demo::{self, DemoSp, SpMode};
use psvc::proxy::{BrokerLocator, Proxy, ProxyConfig, DEFAULT_LISTEN, DEFAULT_MAX_CHAIN};
use psvc::registry::{self, check_descriptor};
use psvc::service_kit;

#[derive(Parser)]
#[command(name = "psvc", version, about = "Personal services: Broker, proxy and demo tooling")]
struct Cli {
    /// Personal services directory (default: $PSVC_HOME/.PS or ~/.PS).
    #[arg(long, global = true)]
    ps_dir: Option<PathBuf>,
    #[arg(long, global = true, default_value = "info")]
    log_level: Level,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// The per-user Broker.
    Broker {
        #[command(subcommand)]
        action: BrokerCmd,
    },
    /// The redirection-aware HTTP proxy.
    Proxy {
        #[command(subcommand)]
        action: ProxyCmd,
    },
    /// Check `.psd` descriptor files.
    Lint {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Demo service provider and personal service.
    Demo {
        #[command(subcommand)]
        action: DemoCmd,
    },
    /// Run an end-to-end scenario (or `all`).
    Scenario {
        name: String,
        /// Print the message transcript even when the scenario passes.
        #[arg(long)]
        transcript: bool,
    },
}

#[derive(Subcommand)]
enum BrokerCmd {
    Run {
        /// TCP port on 127.0.0.1; 0 picks a free one.
        #[arg(long, default_value_t = 0)]
        port: u16,
    },
}

#[derive(Subcommand)]
enum ProxyCmd {
    Run {
        #[arg(long, default_value = DEFAULT_LISTEN)]
        listen: SocketAddr,
        #[arg(long, default_value_t = DEFAULT_MAX_CHAIN)]
        max_chain: usize,
        /// Do not start the Broker from broker.psd when it is not running.
        #[arg(long)]
        no_autolaunch: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Normal,
    Yellow,
    Malformed,
    Tampered,
    Malicious313,
}

#[derive(Subcommand)]
enum DemoCmd {
    /// Cookie-authenticating service provider.
    Sp {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, value_enum, default_value = "normal")]
        mode: ModeArg,
        /// Location used by `--mode malicious313`.
        #[arg(long, default_value = "http://127.0.0.1:9/transfer")]
        victim: Url,
    },
    /// Mock authentication personal service; the last argument is the port.
    Service {
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        args: Vec<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_max_level(cli.log_level)
        .with_writer(std::io::stderr)
        .init();
    let ps_dir = cli.ps_dir.clone().unwrap_or_else(registry::default_ps_dir);
    let runtime = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("psvc: cannot start runtime: {e}");
            return ExitCode::FAILURE;
        }
    };
    match runtime.block_on(run(cli.command, &ps_dir)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("psvc: {e}");
            ExitCode::FAILURE
        }
    }
}

type AnyError = Box<dyn std::error::Error + Send + Sync>;

async fn run(command: Command, ps_dir: &Path) -> Result<ExitCode, AnyError> {
    match command {
        Command::Broker {
            action: BrokerCmd::Run { port },
        } => {
            let (broker, diagnostics) = Broker::open(ps_dir)?;
            for d in &diagnostics {
                tracing::warn!("skipped {d}");
            }
            let running = Arc::new(broker).listen(port, true).await?;
            println!("broker listening on {}", running.local_addr());
            running.run_until_ctrl_c().await;
            Ok(ExitCode::SUCCESS)
        }
        Command::Proxy {
            action: ProxyCmd::Run {
                listen,
                max_chain,
                no_autolaunch,
            },
        } => {
            let mut config = ProxyConfig::new(BrokerLocator::EndpointFile {
                ps_dir: ps_dir.to_owned(),
                autolaunch: !no_autolaunch,
            });
            config.max_chain = max_chain;
            let server = Arc::new(Proxy::new(config)).listen(listen).await?;
            println!("proxy listening on {}", server.local_addr());
            tokio::signal::ctrl_c().await?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Lint { files } => Ok(lint(&files, ps_dir)),
        Command::Demo {
            action: DemoCmd::Sp { port, mode, victim },
        } => {
            let mode = match mode {
                ModeArg::Normal => SpMode::Normal,
                ModeArg::Yellow => SpMode::Yellow,
                ModeArg::Malformed => SpMode::Malformed,
                ModeArg::Tampered => SpMode::Tampered,
                ModeArg::Malicious313 => SpMode::Malicious313(victim),
            };
            let sp = DemoSp::start(port, mode).await?;
            println!("demo SP at {}resource", sp.base_url());
            tokio::select! {
                _ = sp.wait() => {}
                _ = tokio::signal::ctrl_c() => {}
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Demo {
            action: DemoCmd::Service { args },
        } => {
            let ctx = match service_kit::bootstrap(&args) {
                Ok(ctx) => ctx,
                Err(e) => {
                    eprintln!("psvc demo service: {e}");
                    return Ok(ExitCode::from(2));
                }
            };
            let server = demo::run_demo_service(ctx).await?;
            tracing::info!(addr = %server.local_addr(), "demo service listening");
            server.wait().await;
            Ok(ExitCode::SUCCESS)
        }
        Command::Scenario { name, transcript } => {
            let exe = std::env::current_exe()?;
            let names: Vec<&str> = if name == "all" {
                demo::SCENARIOS.to_vec()
            } else {
                vec![name.as_str()]
            };
            let mut ok = true;
            for name in names {
                let report = demo::run_scenario(name, &exe).await?;
                println!("{} {}", if report.passed() { "PASS" } else { "FAIL" }, report.name);
                for c in &report.checks {
                    println!("  [{}] {}", if c.passed { "ok" } else { "!!" }, c.name);
                    if !c.passed && !c.detail.is_empty() {
                        println!("       {}", c.detail);
                    }
                }
                if transcript || !report.passed() {
                    print!("{}", report.transcript);
                }
                ok &= report.passed();
            }
            Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
    }
}

fn lint(files: &[PathBuf], ps_dir: &Path) -> ExitCode {
    let mut clean = true;
    for file in files {
        let text = match std::fs::read(file) {
            Ok(t) => t,
            Err(e) => {
                println!("{}: cannot read: {e}", file.display());
                clean = false;
                continue;
            }
        };
        let problems = check_descriptor(&text, ps_dir);
        if problems.is_empty() {
            println!("{}: ok", file.display());
        }
        for p in problems {
            println!("{}: {p}", file.display());
            clean = false;
        }
    }
    if clean {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
