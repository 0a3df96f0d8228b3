fn main() {
    let result = handpose::cli::run(std::env::args_os());
    std::process::exit(result.exit_code);
}
