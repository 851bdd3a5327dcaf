fn main() {
    std::process::exit(gmcast_cli::run(std::env::args_os()));
}
