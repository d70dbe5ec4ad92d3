fn main() {
    std::process::exit(energynet::cli::main_with_args(std::env::args_os()));
}
