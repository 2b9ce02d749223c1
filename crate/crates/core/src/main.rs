fn main() {
    std::process::exit(reachnet::cli::run(std::env::args_os()));
}
