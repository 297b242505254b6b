fn main() {
    std::process::exit(r2t_cli::run(std::env::args_os()));
}
