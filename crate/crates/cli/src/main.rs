fn main() {
    std::process::exit(lanepath_cli::run(std::env::args()));
}
