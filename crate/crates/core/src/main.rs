fn main() {
    let argv: Vec<String> = std::env::args().collect();
    std::process::exit(trfeddis::cli::cli_main(&argv));
}
