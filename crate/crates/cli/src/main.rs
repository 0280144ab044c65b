fn main() {
    std::process::exit(rgpr_cli::run());
}
