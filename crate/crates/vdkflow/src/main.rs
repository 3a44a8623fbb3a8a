fn main() {
    std::process::exit(vdkflow::cli::main_with(std::env::args_os()));
}
