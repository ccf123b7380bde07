mod input;

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use lschc::catalog;
use lschc::context::{validate_context, Context, FlatContext, Mode, RuleIdLayout};
use lschc::document::{read_context_file, write_context_file, DocumentError};
use lschc::engine::{
    compress, decompress, decompress_with, CompressedPacket, DecompressionEnvironment,
};
use lschc::metrics::{duty_cycle_min_interval, lora_time_on_air, payload_symbols, LoraParams};
use lschc::packet::{parse_stack, serialize_stack, Direction, Layer};
use lschc::registry::{DeviceAddress, RegistryError, RuleRegistry, RuleSlot, StoredRule};
use lschc::scenario::{BenchmarkScenario, DEFAULT_PACKETS_PER_FLOW, DEFAULT_SEED};

/// Static context header compression for IPv6/UDP/ICMPv6/CoAP, flat or layered.
#[derive(Debug, Parser)]
#[command(name = "lschc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compress IPv6 packets (raw binary, or hex with one packet per line).
    Compress(CompressArgs),
    /// Restore packets produced by `compress`.
    Decompress(DecompressArgs),
    /// Validate, convert or export context files.
    #[command(subcommand)]
    Context(ContextCommand),
    /// Manage the network-side rule registry.
    Registry(RegistryArgs),
    /// Replay the RPL/UDP benchmark and print size and airtime tables.
    Bench(BenchArgs),
    /// LoRa time-on-air and duty-cycle off-time for given payload sizes.
    Airtime(AirtimeArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Flat,
    Layered,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Flat => Mode::Flat,
            ModeArg::Layered => Mode::Layered,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DirectionArg {
    Up,
    Down,
}

impl From<DirectionArg> for Direction {
    fn from(d: DirectionArg) -> Self {
        match d {
            DirectionArg::Up => Direction::Up,
            DirectionArg::Down => Direction::Down,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, ValueEnum)]
enum Format {
    #[default]
    Text,
    Csv,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LayerArg {
    Network,
    Transport,
    Application,
}

impl From<LayerArg> for Layer {
    fn from(l: LayerArg) -> Self {
        match l {
            LayerArg::Network => Layer::Network,
            LayerArg::Transport => Layer::Transport,
            LayerArg::Application => Layer::Application,
        }
    }
}

#[derive(Debug, Args)]
struct OutputArgs {
    /// Write packets here instead of standard output.
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Write raw bytes instead of hex lines (single packet only).
    #[arg(long)]
    binary: bool,
}

#[derive(Debug, Args)]
struct CompressArgs {
    #[arg(long)]
    context: PathBuf,
    /// Compress with this kind of context; `flat` flattens a layered file.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, value_enum, default_value = "up")]
    direction: DirectionArg,
    /// Packet file, or `-` for standard input.
    input: PathBuf,
    #[command(flatten)]
    out: OutputArgs,
}

#[derive(Debug, Args)]
struct DecompressArgs {
    /// Context file the packets were compressed with.
    #[arg(
        long,
        required_unless_present = "registry",
        conflicts_with = "registry"
    )]
    context: Option<PathBuf>,
    /// Resolve short rule IDs through this registry instead of a context file.
    #[arg(long, requires = "device")]
    registry: Option<PathBuf>,
    /// Device address (hex) whose short IDs the packets use.
    #[arg(long)]
    device: Option<String>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Interface identifier of the device, 16 hex digits.
    #[arg(long, value_parser = parse_iid)]
    device_iid: u64,
    #[arg(long, value_enum, default_value = "up")]
    direction: DirectionArg,
    input: PathBuf,
    #[command(flatten)]
    out: OutputArgs,
}

#[derive(Debug, Subcommand)]
enum ContextCommand {
    /// Check a context file and list every violation.
    Validate { file: PathBuf },
    /// Re-encode a context; the output extension picks the encoding (.schcb or .schct).
    Convert {
        input: PathBuf,
        output: PathBuf,
        /// `flat` flattens a layered context.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Write one of the built-in contexts.
    Builtin {
        #[arg(value_enum)]
        name: Builtin,
        output: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Builtin {
    /// The single IPv6/UDP reference rule, ID 0.
    Reference,
    /// Two UDP ports to one host, one flat rule each.
    SharedFlat,
    /// Two UDP ports to one host with a shared IPv6 rule.
    SharedLayered,
    /// Benchmark flows (a), (b), (c) as flat rules 0, 1, 2.
    BenchFlat,
    BenchLayered,
}

#[derive(Debug, Args)]
struct RegistryArgs {
    /// Registry file, created on first mutation.
    #[arg(long)]
    registry: PathBuf,
    #[command(subcommand)]
    command: RegistryCommand,
}

#[derive(Debug, Subcommand)]
enum RegistryCommand {
    /// Register every rule of the given context files and print their long IDs.
    Register { files: Vec<PathBuf> },
    /// Give a device the selected rules and write its context.
    Provision {
        #[arg(long)]
        device: String,
        /// Device context file to write.
        #[arg(short, long)]
        output: PathBuf,
        /// Rule-ID width of a flat device context.
        #[arg(long, default_value_t = 5)]
        rule_bits: u8,
        #[arg(required = true)]
        long_ids: Vec<u16>,
    },
    /// Show the stored rule behind a device short ID.
    Resolve {
        #[arg(long)]
        device: String,
        /// Layer of a per-layer short ID; omit for flat IDs.
        #[arg(long, value_enum)]
        layer: Option<LayerArg>,
        short_id: u32,
    },
    /// List stored rules and provisioned devices.
    List,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long, value_enum, default_value = "flat")]
    mode: ModeArg,
    /// Packets generated and round-tripped per flow.
    #[arg(long, default_value_t = DEFAULT_PACKETS_PER_FLOW)]
    packets: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
}

#[derive(Debug, Args)]
struct AirtimeArgs {
    /// Spreading factor; all of 7..12 when omitted.
    #[arg(long, value_parser = clap::value_parser!(u8).range(7..=12))]
    sf: Option<u8>,
    /// PHY payload sizes in octets.
    #[arg(long, num_args = 1.., default_values_t = [1usize, 2, 4, 6, 44, 48])]
    payload: Vec<usize>,
    #[arg(long, default_value_t = 125_000)]
    bandwidth: u32,
    /// Coding rate denominator (4/5 .. 4/8).
    #[arg(long, default_value_t = 5)]
    coding_rate: u8,
    #[arg(long, default_value_t = 8)]
    preamble: u16,
    #[arg(long, default_value_t = 0.001)]
    duty: f64,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Context(String),
    Packet(String),
    Engine(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Context(_) => 2,
            CliError::Packet(_) => 3,
            CliError::Engine(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m)
            | CliError::Context(m)
            | CliError::Packet(m)
            | CliError::Engine(m) => m,
        }
    }
}

impl From<DocumentError> for CliError {
    fn from(e: DocumentError) -> Self {
        let mut msg = e.to_string();
        if let DocumentError::ValidationFailed(violations) = &e {
            for v in violations {
                let _ = write!(msg, "\n  {v}");
            }
        }
        CliError::Context(msg)
    }
}

impl From<RegistryError> for CliError {
    fn from(e: RegistryError) -> Self {
        CliError::Context(e.to_string())
    }
}

fn parse_iid(s: &str) -> Result<u64, String> {
    let digits: String = s
        .trim_start_matches("0x")
        .chars()
        .filter(|&c| c != ':')
        .collect();
    if digits.is_empty() || digits.len() > 16 {
        return Err(format!("expected up to 16 hex digits, got {s:?}"));
    }
    u64::from_str_radix(&digits, 16).map_err(|e| e.to_string())
}

fn parse_device(s: &str) -> Result<DeviceAddress, CliError> {
    DeviceAddress::from_hex(s).map_err(|e| CliError::Usage(format!("device address {s:?}: {e}")))
}

fn load_context(path: &Path, mode: Option<ModeArg>) -> Result<Context, CliError> {
    let ctx = read_context_file(path)?;
    match (mode.map(Mode::from), ctx) {
        (Some(Mode::Flat), Context::Layered(l)) => Ok(l.flatten().into()),
        (Some(Mode::Layered), Context::Flat(_)) => Err(CliError::Context(format!(
            "{} holds a flat context; a layered one cannot be derived from it",
            path.display()
        ))),
        (_, ctx) => Ok(ctx),
    }
}

fn read_packets(path: &Path) -> Result<Vec<Vec<u8>>, CliError> {
    let bytes = input::read_source(path)
        .map_err(|e| CliError::Packet(format!("cannot read {}: {e}", path.display())))?;
    input::parse_packets(&bytes).map_err(|e| CliError::Packet(format!("{}: {e}", path.display())))
}

fn write_packets(out: &OutputArgs, packets: &[Vec<u8>]) -> Result<(), CliError> {
    let bytes = if out.binary {
        match packets {
            [one] => one.clone(),
            _ => {
                return Err(CliError::Usage(format!(
                    "--binary needs exactly one packet, got {}",
                    packets.len()
                )))
            }
        }
    } else {
        packets
            .iter()
            .map(|p| hex::encode(p) + "\n")
            .collect::<String>()
            .into_bytes()
    };
    let result = match &out.output {
        Some(path) => std::fs::write(path, bytes),
        None => std::io::stdout().write_all(&bytes),
    };
    result.map_err(|e| CliError::Usage(format!("cannot write output: {e}")))
}

fn plural(n: usize, word: &str) -> String {
    if n == 1 {
        format!("{n} {word}")
    } else {
        format!("{n} {word}s")
    }
}

fn describe_rule(ctx: &Context, pkt: &CompressedPacket) -> String {
    let layout = ctx.layout();
    let id = pkt.rule_id.value();
    match ctx {
        Context::Flat(_) if id == u64::from(layout.reserved_flat()) => {
            format!("uncompressed (ID {id})")
        }
        Context::Flat(_) => format!("rule {id}"),
        Context::Layered(_) => match layout.decode_rule_id(pkt.rule_id) {
            Ok(ids) if layout.is_all_reserved(ids) => format!("uncompressed (ID {id})"),
            Ok(ids) => format!(
                "rule ALC={} TLC={} NLC={} (ID {id})",
                ids.alc, ids.tlc, ids.nlc
            ),
            Err(_) => format!("rule ID {}", pkt.rule_id),
        },
    }
}

fn cmd_compress(args: CompressArgs) -> Result<(), CliError> {
    let ctx = load_context(&args.context, args.mode)?;
    let mut out = Vec::new();
    for (i, bytes) in read_packets(&args.input)?.iter().enumerate() {
        let stack = parse_stack(bytes, args.direction.into())
            .map_err(|e| CliError::Packet(format!("packet {}: {e}", i + 1)))?;
        let pkt = compress(&ctx, &stack)
            .map_err(|e| CliError::Engine(format!("packet {}: {e}", i + 1)))?;
        eprintln!(
            "packet {}: {}, residue {}, header {} ({} uncompressed)",
            i + 1,
            describe_rule(&ctx, &pkt),
            plural(pkt.residue_bits(), "bit"),
            plural(pkt.header_octets(), "octet"),
            stack.header_len()
        );
        out.push(pkt.to_bytes());
    }
    write_packets(&args.out, &out)
}

fn cmd_decompress(args: DecompressArgs) -> Result<(), CliError> {
    let env = DecompressionEnvironment::new(args.device_iid, args.direction.into());
    let packets = read_packets(&args.input)?;
    let mut out = Vec::with_capacity(packets.len());
    let engine =
        |i: usize, e: lschc::EngineError| CliError::Engine(format!("packet {}: {e}", i + 1));
    match (&args.context, &args.registry) {
        (Some(path), _) => {
            let ctx = load_context(path, args.mode)?;
            for (i, wire) in packets.iter().enumerate() {
                let stack = decompress(wire, &ctx, &env).map_err(|e| engine(i, e))?;
                out.push(serialize_stack(&stack).map_err(|e| CliError::Packet(e.to_string()))?);
            }
        }
        (None, Some(path)) => {
            let reg = RuleRegistry::open(path)?;
            let device = parse_device(args.device.as_deref().unwrap_or_default())?;
            let view = reg.device_view(&device)?;
            for (i, wire) in packets.iter().enumerate() {
                let stack = decompress_with(wire, &view, &env).map_err(|e| engine(i, e))?;
                out.push(serialize_stack(&stack).map_err(|e| CliError::Packet(e.to_string()))?);
            }
        }
        (None, None) => {
            return Err(CliError::Usage(
                "either --context or --registry is required".into(),
            ))
        }
    }
    write_packets(&args.out, &out)
}

fn cmd_context(cmd: ContextCommand) -> Result<(), CliError> {
    match cmd {
        ContextCommand::Validate { file } => {
            let ctx = match read_context_file(&file) {
                Err(DocumentError::ValidationFailed(v)) => {
                    for violation in &v {
                        eprintln!("{}: {violation}", file.display());
                    }
                    return Err(CliError::Context(format!("{} violations", v.len())));
                }
                other => other?,
            };
            debug_assert!(validate_context(&ctx).is_empty());
            let rules = match &ctx {
                Context::Flat(c) => c.rules.len(),
                Context::Layered(c) => c.nlc.len() + c.tlc.len() + c.alc.len(),
            };
            println!(
                "{}: valid {} context, {}, {}",
                file.display(),
                ctx.mode(),
                plural(rules, "rule"),
                plural(ctx.descriptor_count(), "descriptor")
            );
            Ok(())
        }
        ContextCommand::Convert {
            input,
            output,
            mode,
        } => {
            let ctx = load_context(&input, mode)?;
            write_context_file(&output, &ctx)?;
            Ok(())
        }
        ContextCommand::Builtin { name, output } => {
            let ctx: Context = match name {
                Builtin::Reference => {
                    FlatContext::new(vec![catalog::figure3_rule(0)], RuleIdLayout::default()).into()
                }
                Builtin::SharedFlat => catalog::shared_ipv6_flat().into(),
                Builtin::SharedLayered => catalog::shared_ipv6_layered().into(),
                Builtin::BenchFlat => catalog::benchmark_flat_context().into(),
                Builtin::BenchLayered => catalog::benchmark_layered_context().into(),
            };
            write_context_file(&output, &ctx)?;
            Ok(())
        }
    }
}

fn describe_stored(rule: &StoredRule) -> String {
    let kind = match rule.layer() {
        None => "flat".to_string(),
        Some(l) => l.to_string(),
    };
    let fields: Vec<_> = rule
        .fields()
        .iter()
        .map(|d| match d.target_value {
            Some(tv) => format!("{}={tv:#x}/{}", d.field_id, d.cd_action),
            None => format!("{}/{}", d.field_id, d.cd_action),
        })
        .collect();
    format!(
        "{kind} rule, {}: {}",
        plural(fields.len(), "descriptor"),
        fields.join(" ")
    )
}

fn cmd_registry(args: RegistryArgs) -> Result<(), CliError> {
    let mut reg = RuleRegistry::open(&args.registry)?;
    match args.command {
        RegistryCommand::Register { files } => {
            for file in &files {
                let rules: Vec<StoredRule> = match read_context_file(file)? {
                    Context::Flat(c) => c.rules.iter().map(StoredRule::from).collect(),
                    Context::Layered(c) => Layer::ALL
                        .iter()
                        .flat_map(|&l| c.rules(l))
                        .map(StoredRule::from)
                        .collect(),
                };
                for rule in rules {
                    let id = reg.register_rule(rule)?;
                    println!("{}: long ID {id}", file.display());
                }
            }
            reg.store(&args.registry)?;
        }
        RegistryCommand::Provision {
            device,
            output,
            rule_bits,
            long_ids,
        } => {
            let device = parse_device(&device)?;
            let layout = RuleIdLayout::flat(rule_bits);
            let (ctx, slots) = reg.provision_device(&device, &long_ids, layout)?;
            write_context_file(&output, &ctx)?;
            reg.store(&args.registry)?;
            for (slot, long) in slots {
                println!("{slot} -> long ID {long}");
            }
        }
        RegistryCommand::Resolve {
            device,
            layer,
            short_id,
        } => {
            let device = parse_device(&device)?;
            let slot = match layer {
                None => RuleSlot::Flat(short_id),
                Some(l) => RuleSlot::Layer(l.into(), short_id),
            };
            let long = reg.device(&device)?.slots.get(&slot).copied();
            let rule = reg.resolve(&device, slot)?;
            println!(
                "{slot} -> long ID {}: {}",
                long.unwrap_or_default(),
                describe_stored(rule)
            );
        }
        RegistryCommand::List => {
            for (id, rule) in reg.rules() {
                println!("long ID {id}: {}", describe_stored(rule));
            }
            for (addr, profile) in reg.devices() {
                let slots: Vec<_> = profile
                    .slots
                    .iter()
                    .map(|(s, l)| format!("{s} -> {l}"))
                    .collect();
                println!("device {addr} ({}): {}", profile.mode, slots.join(", "));
            }
        }
    }
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<(), CliError> {
    let scenario = BenchmarkScenario {
        seed: args.seed,
        packets_per_flow: args.packets,
        ..BenchmarkScenario::default()
    };
    let report = scenario
        .run(args.mode.into())
        .map_err(|e| CliError::Engine(e.to_string()))?;
    match args.format {
        Format::Text => print!("{}", report.render_text()),
        Format::Csv => print!("{}", report.render_csv()),
    }
    Ok(())
}

fn cmd_airtime(args: AirtimeArgs) -> Result<(), CliError> {
    let sfs: Vec<u8> = match args.sf {
        Some(sf) => vec![sf],
        None => (7..=12).collect(),
    };
    let mut rows = Vec::new();
    for sf in sfs {
        let mut p = LoraParams {
            bandwidth_hz: args.bandwidth,
            coding_rate_denominator: args.coding_rate,
            preamble_symbols: args.preamble,
            duty_cycle: args.duty,
            ..LoraParams::eu868_defaults(sf)
        };
        p.low_data_rate_optimize = p.symbol_time_ms() > 16.0;
        for &pl in &args.payload {
            let toa = lora_time_on_air(&p, pl).map_err(|e| CliError::Usage(e.to_string()))?;
            let off = duty_cycle_min_interval(toa, p.duty_cycle)
                .map_err(|e| CliError::Usage(e.to_string()))?;
            rows.push((sf, pl, payload_symbols(&p, pl), toa, off));
        }
    }
    match args.format {
        Format::Text => {
            println!(
                "{:>3} {:>8} {:>8} {:>12} {:>14}",
                "SF", "octets", "symbols", "airtime_ms", "off_time_ms"
            );
            for (sf, pl, sym, toa, off) in rows {
                println!("{sf:>3} {pl:>8} {sym:>8} {toa:>12.3} {off:>14.1}");
            }
        }
        Format::Csv => {
            println!("sf,payload_octets,payload_symbols,airtime_ms,off_time_ms");
            for (sf, pl, sym, toa, off) in rows {
                println!("{sf},{pl},{sym},{toa:.3},{off:.3}");
            }
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Compress(a) => cmd_compress(a),
        Command::Decompress(a) => cmd_decompress(a),
        Command::Context(c) => cmd_context(c),
        Command::Registry(a) => cmd_registry(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Airtime(a) => cmd_airtime(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
