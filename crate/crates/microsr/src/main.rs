fn main() {
    std::process::exit(microsr::run_cli());
}
