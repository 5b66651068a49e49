fn main() {
    std::process::exit(woodflow::cli::run(std::env::args_os()));
}
