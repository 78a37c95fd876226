use clap::Parser;

fn main() -> std::process::ExitCode {
    lyapresp_cli::main_with(lyapresp_cli::Cli::parse())
}
