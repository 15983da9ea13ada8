use clap::Parser;

/// Executes tasks for one container tag over stdin/stdout frames.
#[derive(Parser)]
struct Args {
    #[arg(long, default_value = "default")]
    tag: String,
}

fn main() {
    let args = Args::parse();
    if let Err(e) = fabric::worker::main_with(&args.tag) {
        eprintln!("worker: {e}");
        std::process::exit(1);
    }
}
