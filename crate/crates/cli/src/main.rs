fn main() {
    std::process::exit(msl_cli::run(std::env::args_os()));
}
