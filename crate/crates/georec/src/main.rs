fn main() {
    std::process::exit(georec::run_cli());
}
