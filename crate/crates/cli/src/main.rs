fn main() {
    std::process::exit(mlmi_cli::run_cli(std::env::args_os()));
}
