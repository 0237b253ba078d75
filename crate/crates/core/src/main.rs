fn main() {
    std::process::exit(defog2refog::cli::main_with_args(std::env::args_os()));
}
