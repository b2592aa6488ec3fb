fn main() {
    std::process::exit(cgan_seg::cli::run(std::env::args_os()));
}
