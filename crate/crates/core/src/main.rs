fn main() {
    std::process::exit(neurofatigue::cli::run(std::env::args_os()));
}
