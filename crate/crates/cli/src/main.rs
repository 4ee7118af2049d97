fn main() {
    std::process::exit(odx_cli::run(std::env::args_os()));
}
