fn main() {
    std::process::exit(lincollapse_cli::run(std::env::args_os()));
}
