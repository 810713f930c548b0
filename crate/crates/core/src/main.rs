fn main() {
    std::process::exit(psmatch::cli::run(std::env::args_os()));
}
