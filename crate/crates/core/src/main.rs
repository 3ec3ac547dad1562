fn main() {
    std::process::exit(delta_sim::cli::run(std::env::args_os()));
}
