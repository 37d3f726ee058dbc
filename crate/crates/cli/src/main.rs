use clap::Parser;

fn main() {
    let cli = stream_meta_cli::Cli::parse();
    std::process::exit(stream_meta_cli::main_with(cli));
}
