#include "hulm/checkpoint.hpp"

#include <cstring>

#include "hulm/errors.hpp"

namespace hulm {

const char* const kCheckpointMagic = "hulm-checkpoint-v1\n";

namespace {

void put_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) {
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
}

void put_u64(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) {
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
}

void put_f64(std::string& out, double d) {
    uint64_t bits;
    std::memcpy(&bits, &d, sizeof(bits));
    put_u64(out, bits);
}

struct Reader {
    const std::string& data;
    size_t pos = 0;

    void need(size_t n) const {
        if (pos + n > data.size()) {
            throw ParseError("checkpoint truncated at byte " + std::to_string(pos));
        }
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            v |= static_cast<uint32_t>(static_cast<unsigned char>(data[pos + i])) << (8 * i);
        }
        pos += 4;
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) {
            v |= static_cast<uint64_t>(static_cast<unsigned char>(data[pos + i])) << (8 * i);
        }
        pos += 8;
        return v;
    }
    double f64() {
        const uint64_t bits = u64();
        double d;
        std::memcpy(&d, &bits, sizeof(d));
        return d;
    }
    std::string bytes(size_t n) {
        need(n);
        std::string s = data.substr(pos, n);
        pos += n;
        return s;
    }
};

}  // namespace

void save_tensor_file(const std::string& path, const KvConfig& header,
                      const std::map<std::string, Tensor>& tensors) {
    std::string out;
    out += kCheckpointMagic;
    const std::string header_text = header.serialize();
    put_u64(out, header_text.size());
    out += header_text;
    put_u32(out, static_cast<uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {  // std::map: sorted, deterministic
        put_u32(out, static_cast<uint32_t>(name.size()));
        out += name;
        put_u32(out, static_cast<uint32_t>(t.shape().size()));
        for (int d : t.shape()) {
            put_u64(out, static_cast<uint64_t>(d));
        }
        for (double v : t.values()) {
            put_f64(out, v);
        }
    }
    write_file(path, out);
}

TensorFile load_tensor_file(const std::string& path) {
    const std::string data = read_file(path);
    const size_t magic_len = std::strlen(kCheckpointMagic);
    if (data.size() < magic_len || data.compare(0, magic_len, kCheckpointMagic) != 0) {
        throw ParseError("not a checkpoint file (bad magic): " + path);
    }
    Reader r{data, magic_len};
    TensorFile tf;
    const uint64_t header_len = r.u64();
    tf.header = KvConfig::parse(r.bytes(header_len));
    const uint32_t count = r.u32();
    for (uint32_t i = 0; i < count; ++i) {
        const uint32_t name_len = r.u32();
        const std::string name = r.bytes(name_len);
        const uint32_t rank = r.u32();
        std::vector<int> shape;
        size_t numel = 1;
        for (uint32_t d = 0; d < rank; ++d) {
            shape.push_back(static_cast<int>(r.u64()));
            numel *= static_cast<size_t>(shape.back());
        }
        std::vector<double> values(numel);
        for (size_t j = 0; j < numel; ++j) {
            values[j] = r.f64();
        }
        tf.tensors.emplace(name, Tensor::from(std::move(shape), std::move(values)));
    }
    if (r.pos != data.size()) {
        throw ParseError("checkpoint has trailing bytes: " + path);
    }
    return tf;
}

}  // namespace hulm
