fn main() {
    std::process::exit(stochwave_cli::run(std::env::args_os()));
}
