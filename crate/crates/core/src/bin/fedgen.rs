fn main() {
    fedgen_core::cli::init_logging();
    std::process::exit(fedgen_core::cli::run_cli(std::env::args_os()));
}
