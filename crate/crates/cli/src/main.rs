fn main() {
    std::process::exit(musrep_cli::run(std::env::args_os()));
}
