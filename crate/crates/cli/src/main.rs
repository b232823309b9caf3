fn main() {
    std::process::exit(simpleformer_cli::run(std::env::args_os()));
}
