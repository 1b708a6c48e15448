fn main() {
    println!("uasr placeholder");
}
