use clap::Parser;
use ndi_wsod::cli::{run, Cli};

fn main() {
    std::process::exit(run(Cli::parse()));
}
