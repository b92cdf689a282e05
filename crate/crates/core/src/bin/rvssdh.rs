fn main() {
    std::process::exit(rvssdh::cli::main_with_args(std::env::args_os()));
}
