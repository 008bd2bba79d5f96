fn main() {
    std::process::exit(gencurve::harness::run_cli(std::env::args_os()));
}
