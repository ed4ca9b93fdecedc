fn main() {
    std::process::exit(dpcpl_cli::run());
}
