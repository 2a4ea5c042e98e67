fn main() {
    std::process::exit(smre::harness::run_cli(std::env::args_os()));
}
