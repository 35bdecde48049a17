fn main() {
    std::process::exit(congeo::cli::run(std::env::args_os()));
}
