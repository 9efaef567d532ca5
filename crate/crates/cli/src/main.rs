fn main() {
    std::process::exit(cellsym_cli::run(std::env::args_os()));
}
