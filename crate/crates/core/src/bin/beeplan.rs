fn main() {
    std::process::exit(beeplan::cli::run(std::env::args_os()));
}
