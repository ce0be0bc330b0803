fn main() {
    std::process::exit(icrlab_cli::run(std::env::args_os()));
}
