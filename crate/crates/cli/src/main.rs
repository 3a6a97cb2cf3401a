fn main() {
    std::process::exit(res_cli::cli::run(std::env::args_os()));
}
