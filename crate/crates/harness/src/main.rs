fn main() {
    std::process::exit(fat_harness::cli::main_with(std::env::args_os()));
}
