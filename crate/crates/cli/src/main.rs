fn main() {
    hvsim_cli::init_logging();
    std::process::exit(hvsim_cli::run_cli(std::env::args_os()));
}
