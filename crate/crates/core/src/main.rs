fn main() {
    let args: Vec<String> = std::env::args().collect();
    std::process::exit(moe_compress::cli::run(&args));
}
