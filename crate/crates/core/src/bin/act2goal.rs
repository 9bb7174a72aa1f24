fn main() {
    std::process::exit(act2goal::harness::run_cli(std::env::args_os()));
}
