#include <gtest/gtest.h>

#include <random>

#include "packet_gen.hpp"
#include "tdmqtt/codec.hpp"

using namespace tdmqtt;
using Bytes = std::vector<std::uint8_t>;

namespace
{
Bytes bytes_of(std::string_view s) { return {s.begin(), s.end()}; }

Bytes concat(std::initializer_list<Bytes> parts)
{
    Bytes out;
    for (const auto& p : parts)
        out.insert(out.end(), p.begin(), p.end());
    return out;
}

// Hand-assembled from the MQTT 5 layout tables: two-byte length prefix + UTF-8.
Bytes mqtt_string(std::string_view s)
{
    return concat({Bytes{static_cast<std::uint8_t>(s.size() >> 8), static_cast<std::uint8_t>(s.size() & 0xFF)},
                   bytes_of(s)});
}

// Independent variable-byte-integer encoder: 7 data bits per byte, continuation bit 0x80.
Bytes vbi(std::uint32_t v)
{
    Bytes out;
    do {
        std::uint8_t b = v % 128;
        v /= 128;
        if (v > 0)
            b |= 128;
        out.push_back(b);
    } while (v > 0);
    return out;
}

Bytes with_header(std::uint8_t first, const Bytes& body) { return concat({Bytes{first}, vbi(body.size()), body}); }

Decoded expect_decoded(const DecodeResult& r)
{
    if (const auto* m = std::get_if<Malformed>(&r))
        ADD_FAILURE() << "malformed: " << m->reason;
    EXPECT_TRUE(std::holds_alternative<Decoded>(r));
    const auto* d = std::get_if<Decoded>(&r);
    return d ? *d : Decoded{PingReq{}, 0};
}

} // namespace

// ----- byte-exact oracles -----

TEST(Codec, PingReqBytes)
{
    EXPECT_EQ(encode(PingReq{}), (Bytes{0xC0, 0x00}));
}

TEST(Codec, NormalDisconnectBytes)
{
    const auto b = encode(Disconnect{});
    ASSERT_FALSE(b.empty());
    EXPECT_EQ(b[0], 0xE0);
    EXPECT_EQ(b, (Bytes{0xE0, 0x00}));
}

TEST(Codec, DecodePingResp)
{
    const Bytes in{0xD0, 0x00};
    const auto d = expect_decoded(decode(in));
    EXPECT_TRUE(std::holds_alternative<PingResp>(d.packet));
    EXPECT_EQ(d.consumed, 2u);
}

TEST(Codec, ConnectMatchesHandAssembledBytes)
{
    const Bytes body = concat({mqtt_string("MQTT"), Bytes{0x05, 0x02, 0x00, 0x05, 0x00}, mqtt_string("c1")});
    const auto expected = with_header(0x10, body);
    EXPECT_EQ(encode(Connect{"c1", 5}), expected);
    const auto d = expect_decoded(decode(expected));
    EXPECT_EQ(std::get<Connect>(d.packet), (Connect{"c1", 5}));
}

TEST(Codec, SubscribeMatchesHandAssembledBytes)
{
    const Bytes body = concat({Bytes{0x00, 0x01, 0x00}, mqtt_string("a/#"), Bytes{0x01}});
    const auto expected = with_header(0x82, body);
    EXPECT_EQ(encode(Subscribe{1, {"a/#"}}), expected);
    const auto d = expect_decoded(decode(expected));
    EXPECT_EQ(std::get<Subscribe>(d.packet), (Subscribe{1, {"a/#"}}));
}

TEST(Codec, PublishQos1MatchesHandAssembledBytes)
{
    const Bytes body = concat({mqtt_string("t"), Bytes{0x00, 0x07, 0x00}, bytes_of("hi")});
    EXPECT_EQ(encode(Publish{TopicName("t"), 7, 1, bytes_of("hi"), false}), with_header(0x32, body));
    // retain flag sets bit 0
    EXPECT_EQ(encode(Publish{TopicName("t"), 7, 1, bytes_of("hi"), true})[0], 0x33);
}

TEST(Codec, RedirectDisconnectCarriesServerReference)
{
    const Bytes props = concat({Bytes{0x1C}, mqtt_string("b2:1883")});
    const Bytes body = concat({Bytes{0x9C}, vbi(props.size()), props});
    const auto expected = with_header(0xE0, body);
    const Disconnect d{ReasonCode::use_another_server, BrokerRef{"b2", 1883}, std::nullopt};
    EXPECT_EQ(encode(d), expected);
    EXPECT_EQ(std::get<Disconnect>(expect_decoded(decode(expected)).packet), d);
}

TEST(Codec, SuccessPubAckIsTwoBytes)
{
    EXPECT_EQ(encode(PubAck{0x1234, success}), (Bytes{0x40, 0x02, 0x12, 0x34}));
}

TEST(Codec, MultiByteRemainingLength)
{
    const Publish p{TopicName("t"), std::nullopt, 0, Bytes(318, 0xAB), false};
    const auto b = encode(p);
    // body = 3 (topic) + 1 (properties) + 318 = 322
    ASSERT_GE(b.size(), 3u);
    EXPECT_EQ(Bytes(b.begin() + 1, b.begin() + 3), vbi(322));
    EXPECT_EQ(b.size(), 1 + 2 + 322u);
}

TEST(Codec, SubscribeRoundTrip)
{
    const ControlPacket p = Subscribe{1, {"a/#"}};
    const auto d = expect_decoded(decode(encode(p)));
    EXPECT_EQ(d.packet, p);
}

TEST(Codec, TruncatedInputIsIncomplete)
{
    const Bytes in{0xC0};
    EXPECT_TRUE(std::holds_alternative<Incomplete>(decode(in)));
    EXPECT_TRUE(std::holds_alternative<Incomplete>(decode(Bytes{})));
}

TEST(Codec, IncompleteReportsMissingBytes)
{
    const auto full = encode(Connect{"abc", 10});
    const Bytes part(full.begin(), full.begin() + 5);
    const auto r = decode(part);
    ASSERT_TRUE(std::holds_alternative<Incomplete>(r));
    ASSERT_TRUE(std::get<Incomplete>(r).needed.has_value());
    EXPECT_EQ(*std::get<Incomplete>(r).needed, full.size() - 5);
}

TEST(Codec, TrailingBytesUntouched)
{
    auto b = encode(PubAck{9, success});
    const auto len = b.size();
    b.push_back(0xC0);
    b.push_back(0x00);
    const auto d = expect_decoded(decode(b));
    EXPECT_EQ(d.consumed, len);
    EXPECT_EQ(d.packet, ControlPacket(PubAck{9, success}));
}

// ----- error paths -----

TEST(Codec, EncodeRejectsInvariantViolations)
{
    EXPECT_THROW((void)encode(Publish{TopicName("t"), std::nullopt, 1, {}, false}), InvalidPacket);
    EXPECT_THROW((void)encode(Publish{TopicName("t"), 3, 0, {}, false}), InvalidPacket);
    EXPECT_THROW((void)encode(Publish{TopicName("t"), 3, 2, {}, false}), InvalidPacket);
    EXPECT_THROW((void)encode(Subscribe{0, {"a"}}), InvalidPacket);
    EXPECT_THROW((void)encode(Subscribe{1, {}}), InvalidPacket);
    EXPECT_THROW((void)encode(Disconnect{ReasonCode::normal, BrokerRef{"b", 1}, std::nullopt}), InvalidPacket);
    EXPECT_THROW((void)encode(Disconnect{ReasonCode::topic_filter_not_accepted, BrokerRef{"b", 1}, std::nullopt}),
                 InvalidPacket);
}

TEST(Codec, QoS2IsMalformed)
{
    const Bytes body = concat({mqtt_string("t"), Bytes{0x00, 0x01, 0x00}});
    EXPECT_TRUE(std::holds_alternative<Malformed>(decode(with_header(0x34, body))));
}

TEST(Codec, BadInputIsMalformed)
{
    // reserved packet type 0
    EXPECT_TRUE(std::holds_alternative<Malformed>(decode(Bytes{0x00, 0x00})));
    // five-byte remaining length
    EXPECT_TRUE(std::holds_alternative<Malformed>(decode(Bytes{0x30, 0xFF, 0xFF, 0xFF, 0xFF, 0x01})));
    // wrong SUBSCRIBE flags
    const Bytes sub_body = concat({Bytes{0x00, 0x01, 0x00}, mqtt_string("a"), Bytes{0x01}});
    EXPECT_TRUE(std::holds_alternative<Malformed>(decode(with_header(0x80, sub_body))));
    // wildcard in a PUBLISH topic
    EXPECT_TRUE(std::holds_alternative<Malformed>(decode(with_header(0x30, concat({mqtt_string("a/#"), Bytes{0x00}})))));
    // protocol level 4
    const Bytes v311 = concat({mqtt_string("MQTT"), Bytes{0x04, 0x02, 0x00, 0x05, 0x00}, mqtt_string("c")});
    EXPECT_TRUE(std::holds_alternative<Malformed>(decode(with_header(0x10, v311))));
    // length field overruns the body
    EXPECT_TRUE(std::holds_alternative<Malformed>(decode(with_header(0x30, Bytes{0x00, 0x09, 'a'}))));
    // Server Reference on a normal DISCONNECT
    const Bytes props = concat({Bytes{0x1C}, mqtt_string("b:1")});
    EXPECT_TRUE(std::holds_alternative<Malformed>(
        decode(with_header(0xE0, concat({Bytes{0x00}, vbi(props.size()), props})))));
}

TEST(Codec, UnknownPropertiesAreSkipped)
{
    // Session Expiry Interval (0x11, four bytes) before the Server Reference
    const Bytes props = concat({Bytes{0x11, 0, 0, 0, 60, 0x1C}, mqtt_string("h:7")});
    const auto in = with_header(0xE0, concat({Bytes{0x9D}, vbi(props.size()), props}));
    const auto d = expect_decoded(decode(in));
    EXPECT_EQ(std::get<Disconnect>(d.packet), (Disconnect{ReasonCode::server_moved, BrokerRef{"h", 7}, std::nullopt}));
}

TEST(Codec, UnnamedReasonCodesArePreserved)
{
    const ControlPacket p = PubAck{5, static_cast<ReasonCode>(0x10)};
    EXPECT_EQ(expect_decoded(decode(encode(p))).packet, p);
}

// ----- properties -----

TEST(CodecProperty, RandomRoundTrip)
{
    test::PacketGen g(20240611);
    for (int i = 0; i < 20000; ++i) {
        const auto p = g.packet();
        const auto b = encode(p);
        const auto r = decode(b);
        ASSERT_TRUE(std::holds_alternative<Decoded>(r)) << packet_name(p) << " #" << i;
        EXPECT_EQ(std::get<Decoded>(r).packet, p) << packet_name(p) << " #" << i;
        EXPECT_EQ(std::get<Decoded>(r).consumed, b.size());
    }
}

TEST(CodecProperty, TruncationNeverYieldsPacket)
{
    test::PacketGen g(77);
    for (int i = 0; i < 2000; ++i) {
        const auto b = encode(g.packet());
        for (std::size_t n = 0; n < b.size(); ++n) {
            const auto r = decode(std::span(b.data(), n));
            ASSERT_FALSE(std::holds_alternative<Decoded>(r)) << "prefix " << n << " of " << b.size();
        }
    }
}

TEST(CodecProperty, DecodeStaysWithinDeclaredLength)
{
    // Random bytes: never crash, never consume more than is present.
    test::PacketGen g(5);
    for (int i = 0; i < 20000; ++i) {
        Bytes b(g.below(40));
        for (auto& x : b)
            x = static_cast<std::uint8_t>(g.rng());
        if (!b.empty() && g.coin())
            b[0] = static_cast<std::uint8_t>((1 + g.below(14)) << 4);
        const auto r = decode(b);
        if (const auto* d = std::get_if<Decoded>(&r)) {
            ASSERT_LE(d->consumed, b.size());
            // re-decoding the consumed prefix alone gives the same packet
            const auto again = decode(std::span(b.data(), d->consumed));
            ASSERT_TRUE(std::holds_alternative<Decoded>(again));
            EXPECT_EQ(std::get<Decoded>(again).packet, d->packet);
        }
    }
}
