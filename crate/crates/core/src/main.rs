fn main() {
    let code = fp_volseg::cli::run(std::env::args_os());
    std::process::exit(code);
}
