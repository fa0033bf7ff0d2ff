fn main() {
    let argv: Vec<String> = std::env::args().collect();
    std::process::exit(branchkit_cli::run_cli(&argv));
}
