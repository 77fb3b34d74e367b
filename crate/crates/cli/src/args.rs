use clap::builder::PossibleValuesParser;
use clap::{value_parser, Arg, ArgAction, Command};

use gradsuggest::harness::CONFIG_KEYS;
use gradsuggest::models::checkpoint;
use gradsuggest::data::GGAS_VERSION;

pub fn version() -> String {
    format!(
        "{} (GGAS v{GGAS_VERSION}, GGMD v{})",
        env!("CARGO_PKG_VERSION"),
        checkpoint::VERSION
    )
}

fn opt(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name).long(name).value_name("VALUE").help(help)
}

fn seed() -> Arg {
    opt("seed", "Random seed")
        .value_parser(value_parser!(u64))
        .default_value("1")
}

fn site() -> Arg {
    opt("site", "Acquisition site").value_parser(PossibleValuesParser::new(["A", "B"]))
}

fn lr(default: &'static str) -> Arg {
    opt("lr", "Adam learning rate")
        .value_parser(value_parser!(f64))
        .default_value(default)
}

fn epochs(default: &'static str) -> Arg {
    opt("epochs", "Training epochs")
        .value_parser(value_parser!(usize))
        .default_value(default)
}

fn batch_size() -> Arg {
    opt("batch-size", "Mini-batch size")
        .value_parser(value_parser!(usize))
        .default_value("16")
}

fn data() -> Arg {
    opt("data", "Dataset directory").value_name("DIR").required(true)
}

pub fn command() -> Command {
    let gen = Command::new("gen-data")
        .about("Generate a phantom dataset directory")
        .arg(opt("out", "Output directory").value_name("DIR").required(true))
        .arg(
            opt("patients", "Training patients")
                .value_parser(value_parser!(usize))
                .default_value("60"),
        )
        .arg(
            opt("test-patients", "Test patients")
                .value_parser(value_parser!(usize))
                .default_value("0"),
        )
        .arg(
            opt("slices", "Slices per patient")
                .value_parser(value_parser!(usize))
                .default_value("8"),
        )
        .arg(site().default_value("A"))
        .arg(
            opt("height", "Slice height")
                .value_parser(value_parser!(usize))
                .default_value("32"),
        )
        .arg(
            opt("width", "Slice width")
                .value_parser(value_parser!(usize))
                .default_value("32"),
        )
        .arg(seed());

    let train_vae = Command::new("train-vae")
        .about("Train the VAE on the training images of a dataset")
        .arg(data())
        .arg(opt("out", "Checkpoint to write").value_name("FILE").required(true))
        .arg(site())
        .arg(
            opt("latent-dim", "Latent dimension")
                .value_parser(value_parser!(usize))
                .default_value("5"),
        )
        .arg(epochs("50"))
        .arg(lr("1e-4"))
        .arg(batch_size())
        .arg(seed());

    let train_seg = Command::new("train-seg")
        .about("Train the segmenter on annotated slices")
        .arg(data())
        .arg(opt("out", "Checkpoint to write").value_name("FILE").required(true))
        .arg(opt("ids", "Patient or sample ids to train on, one per line (default: all training slices)").value_name("FILE"))
        .arg(opt("init", "Segmenter checkpoint to continue from").value_name("FILE"))
        .arg(epochs("30"))
        .arg(lr("1e-3"))
        .arg(batch_size())
        .arg(seed());

    let suggest = Command::new("suggest")
        .about("Suggest training units to annotate next")
        .arg(
            opt("method", "Suggestion method")
                .value_parser(PossibleValuesParser::new(["random", "gradient", "oracle"]))
                .required(true),
        )
        .arg(
            opt("m", "Number of suggestions")
                .value_parser(value_parser!(usize))
                .required(true),
        )
        .arg(data())
        .arg(
            opt("strategy", "Selection unit")
                .value_parser(PossibleValuesParser::new(["image", "patient"]))
                .default_value("patient"),
        )
        .arg(opt("annotated", "Ids already annotated, one per line").value_name("FILE"))
        .arg(opt("seg", "Segmenter checkpoint (gradient, oracle)").value_name("FILE"))
        .arg(opt("vae", "VAE checkpoint (gradient)").value_name("FILE"))
        .arg(site())
        .arg(
            opt("alpha", "Input gradient step")
                .value_parser(value_parser!(f64))
                .default_value("1e-4"),
        )
        .arg(
            opt("theta-max", "Cone half-angle in degrees")
                .value_parser(value_parser!(f64))
                .default_value("45"),
        )
        .arg(seed())
        .arg(opt("out", "Suggestion file (default: standard output)").value_name("FILE"));

    let mut run = Command::new("run")
        .about("Run a full experiment and write report.csv plus SVG charts")
        .arg(opt("config", "Config file of flat `key = value` lines").value_name("FILE"))
        .arg(
            opt("jobs", "Worker threads")
                .value_parser(value_parser!(usize))
                .default_value("1"),
        )
        .arg(
            opt("out", "Report directory")
                .value_name("DIR")
                .default_value("report"),
        );
    for key in CONFIG_KEYS {
        let flag = key.replace('_', "-");
        run = run.arg(
            Arg::new(key)
                .long(flag)
                .value_name("VALUE")
                .help(format!("Overrides config key `{key}`")),
        );
    }

    let report = Command::new("report")
        .about("Aggregate a report CSV and redraw its charts")
        .arg(opt("csv", "Report CSV").value_name("FILE").required(true))
        .arg(opt("out", "Output directory").value_name("DIR").required(true));

    Command::new("gradsuggest")
        .about("Gradient-guided suggestive annotation on a learned latent manifold")
        .version(version())
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommands([gen, train_vae, train_seg, suggest, run, report])
        .disable_help_subcommand(true)
        .arg(
            Arg::new("quiet")
                .long("quiet")
                .short('q')
                .global(true)
                .action(ArgAction::SetTrue)
                .help("Suppress progress output"),
        )
}
