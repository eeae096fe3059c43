fn main() {
    std::process::exit(multipop::cli::run(std::env::args_os()));
}
